"""Current-based LIF neurons and the spiking autoencoder (SAE).

The network runs one time step per call.  Every layer holds a synaptic
current ``i`` and a membrane potential ``u``:

    i' = alpha * i + input
    u_pre = beta * u + i'
    s = H(u_pre - theta)
    u' = u_pre - theta * s          (subtract reset)  or  u_pre * (1 - s)  (zero reset)

The Heaviside step is differentiated with the arctangent surrogate
``k / (1 + (pi k (u - theta))^2)``.  In *smooth* mode the forward spike itself
is replaced by the arctangent sigmoid, which makes the whole network
differentiable (used for gradient checking).
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


def surrogate_sigma(u, theta=1.0, k=2.0):
    """Arctangent sigmoid ``atan(pi k (u - theta)) / pi + 1/2``."""
    u = torch.as_tensor(u)
    return torch.atan(math.pi * k * (u - theta)) / math.pi + 0.5


def surrogate_grad(u, theta=1.0, k=2.0):
    """Derivative of :func:`surrogate_sigma` with respect to ``u``."""
    u = torch.as_tensor(u)
    return k / (1.0 + (math.pi * k * (u - theta)) ** 2)


class ArctanSpike(torch.autograd.Function):
    """Hard threshold forward, arctangent surrogate backward."""

    @staticmethod
    def forward(ctx, v, k):
        ctx.save_for_backward(v)
        ctx.k = k
        return (v >= 0).to(v.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (v,) = ctx.saved_tensors
        k = ctx.k
        return grad_out * k / (1.0 + (math.pi * k * v) ** 2), None


def spike(u: torch.Tensor, theta: float, k: float = 2.0, smooth: bool = False) -> torch.Tensor:
    if smooth:
        return surrogate_sigma(u, theta, k)
    return ArctanSpike.apply(u - theta, k)


@dataclass(frozen=True)
class LifConfig:
    alpha: float = 0.8
    beta: float = 0.9
    theta: float = 1.0
    reset: str = "subtract"

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ValueError("alpha and beta must lie in [0, 1]")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.reset not in ("subtract", "zero"):
            raise ValueError(f"unknown reset rule {self.reset!r}")


class LifState(NamedTuple):
    i: torch.Tensor
    u: torch.Tensor

    @classmethod
    def zeros(cls, shape, dtype=torch.float32):
        return cls(torch.zeros(shape, dtype=dtype), torch.zeros(shape, dtype=dtype))


def lif_step(state: LifState, input_current: torch.Tensor, cfg: LifConfig, *, theta: float | None = None,
             k: float = 2.0, smooth: bool = False) -> tuple[LifState, torch.Tensor]:
    """Advance one time step; returns the new state and the emitted spikes."""
    input_current = torch.as_tensor(input_current, dtype=state.u.dtype)
    if not torch.isfinite(input_current).all():
        raise FloatingPointError("non-finite input current")
    theta = cfg.theta if theta is None else theta
    i_new = cfg.alpha * state.i + input_current
    u_pre = cfg.beta * state.u + i_new
    s = spike(u_pre, theta, k, smooth)
    if cfg.reset == "subtract":
        u_new = u_pre - theta * s
    else:
        u_new = u_pre * (1.0 - s)
    return LifState(i_new, u_new), s


def conv_out_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def conv_spike_layer(spikes_in: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None,
                     state: LifState, cfg: LifConfig, stride: int = 1, padding: int = 0,
                     k: float = 2.0) -> tuple[torch.Tensor, LifState]:
    """Cross-correlate ``[B, C, H, W]`` spikes with ``weight`` and feed the result to LIF neurons."""
    current = F.conv2d(spikes_in, weight, bias, stride=stride, padding=padding)
    if current.shape != state.u.shape:
        raise ValueError(f"layer output {tuple(current.shape)} does not match state {tuple(state.u.shape)}")
    state, spikes = lif_step(state, current, cfg, k=k)
    return spikes, state


@dataclass(frozen=True)
class SAEConfig:
    """Architecture of the spiking autoencoder.

    The default maps ``[2, 64, 64]`` through channels 32, 64, 128 (3x3,
    stride 2, padding 1) to ``[128, 8, 8]`` = 8192 units, a 128-neuron latent
    layer, and back through mirrored transposed convolutions.
    """

    input_shape: tuple[int, int, int] = (2, 64, 64)
    channels: tuple[int, ...] = (32, 64, 128)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    latent_dim: int = 128
    lif: LifConfig = field(default_factory=LifConfig)
    theta_out: float = 1e6

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if isinstance(self.lif, dict):
            object.__setattr__(self, "lif", LifConfig(**self.lif))
        if len(self.input_shape) != 3 or self.input_shape[0] != 2:
            raise ValueError("input shape must be [2, H, W]")
        if not self.channels:
            raise ValueError("need at least one encoder convolution")
        sizes = self.spatial_sizes()
        if min(sizes[-1]) < 1:
            raise ValueError("encoder collapses the input to nothing")
        self.output_paddings()

    @classmethod
    def for_input(cls, size: int, **kw) -> "SAEConfig":
        """Default channel ladder for 64x64 or 32x32 inputs (the latter drops one stage)."""
        channels = {64: (32, 64, 128), 32: (64, 128)}.get(size)
        if channels is None:
            raise ValueError("default ladders exist for 32 and 64 only")
        kw.setdefault("channels", channels)
        return cls(input_shape=(2, size, size), **kw)

    def spatial_sizes(self) -> list[tuple[int, int]]:
        h, w = self.input_shape[1:]
        sizes = [(h, w)]
        for _ in self.channels:
            h = conv_out_size(h, self.kernel, self.stride, self.padding)
            w = conv_out_size(w, self.kernel, self.stride, self.padding)
            sizes.append((h, w))
        return sizes

    def output_paddings(self) -> list[tuple[int, int]]:
        sizes = self.spatial_sizes()
        pads = []
        for (th, tw), (sh, sw) in zip(sizes[-2::-1], sizes[:0:-1]):
            ph = th - ((sh - 1) * self.stride - 2 * self.padding + self.kernel)
            pw = tw - ((sw - 1) * self.stride - 2 * self.padding + self.kernel)
            if not (0 <= ph < self.stride and 0 <= pw < self.stride):
                raise ValueError("decoder cannot mirror the encoder geometry")
            pads.append((ph, pw))
        return pads

    @property
    def pre_latent_shape(self) -> tuple[int, int, int]:
        h, w = self.spatial_sizes()[-1]
        return (self.channels[-1], h, w)

    @property
    def pre_latent_width(self) -> int:
        return int(np.prod(self.pre_latent_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SAEConfig":
        d = dict(d)
        d["lif"] = LifConfig(**d.get("lif", {}))
        return cls(**d)


class StepOutput(NamedTuple):
    latent_spikes: torch.Tensor
    out_membrane: torch.Tensor
    out_spikes: torch.Tensor
    states: list


class SpikingAutoencoder(nn.Module):
    """Encoder convolutions -> dense latent -> dense -> transposed convolutions."""

    def __init__(self, cfg: SAEConfig = SAEConfig(), slope: float = 2.0, smooth: bool = False,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.slope = slope
        self.smooth = smooth
        chans = [cfg.input_shape[0], *cfg.channels]
        self.encoder = nn.ModuleList(
            nn.Conv2d(cin, cout, cfg.kernel, cfg.stride, cfg.padding) for cin, cout in zip(chans[:-1], chans[1:])
        )
        self.enc_fc = nn.Linear(cfg.pre_latent_width, cfg.latent_dim)
        self.dec_fc = nn.Linear(cfg.latent_dim, cfg.pre_latent_width)
        rev = chans[::-1]
        self.decoder = nn.ModuleList(
            nn.ConvTranspose2d(cin, cout, cfg.kernel, cfg.stride, cfg.padding, output_padding=op)
            for cin, cout, op in zip(rev[:-1], rev[1:], cfg.output_paddings())
        )
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        """Uniform He-style fan-in initialisation, zero biases."""
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, (nn.Conv2d, nn.Linear)):
                    fan_in = mod.weight[0].numel()
                elif isinstance(mod, nn.ConvTranspose2d):
                    # each output unit sees in_channels * k * k / stride^2 inputs on average
                    fan_in = mod.weight.shape[0] * mod.weight[0, 0].numel() / self.cfg.stride**2
                else:
                    continue
                bound = math.sqrt(6.0 / fan_in)
                mod.weight.uniform_(-bound, bound, generator=generator)
                mod.bias.zero_()

    def layer_shapes(self, batch: int) -> list[tuple[int, ...]]:
        sizes = self.cfg.spatial_sizes()
        shapes = [(batch, c, *hw) for c, hw in zip(self.cfg.channels, sizes[1:])]
        shapes.append((batch, self.cfg.latent_dim))
        shapes.append((batch, self.cfg.pre_latent_width))
        rev_ch = [self.cfg.input_shape[0], *self.cfg.channels][::-1][1:]
        shapes += [(batch, c, *hw) for c, hw in zip(rev_ch, sizes[-2::-1])]
        return shapes

    def init_states(self, batch: int = 1, dtype=None) -> list[LifState]:
        dtype = dtype or self.enc_fc.weight.dtype
        return [LifState.zeros(s, dtype) for s in self.layer_shapes(batch)]

    def _lif(self, state, current, theta=None):
        return lif_step(state, current, self.cfg.lif, theta=theta, k=self.slope, smooth=self.smooth)

    def step(self, x: torch.Tensor, states: Sequence[LifState]) -> StepOutput:
        """One time step for a batch ``x`` of shape ``[B, 2, H, W]``."""
        new_states = []
        layer = iter(states)
        h = x
        for conv in self.encoder:
            st, h = self._lif(next(layer), conv(h))
            new_states.append(st)
        h = h.flatten(1)
        st, latent = self._lif(next(layer), self.enc_fc(h))
        new_states.append(st)
        st, h = self._lif(next(layer), self.dec_fc(latent))
        new_states.append(st)
        h = h.view(-1, *self.cfg.pre_latent_shape)
        last = len(self.decoder) - 1
        for j, deconv in enumerate(self.decoder):
            theta = self.cfg.theta_out if j == last else None
            st, h = self._lif(next(layer), deconv(h), theta)
            new_states.append(st)
        out_membrane = new_states[-1].u
        if not torch.isfinite(out_membrane).all():
            raise FloatingPointError("non-finite activation in forward pass")
        return StepOutput(latent, out_membrane, h, new_states)

    def forward(self, x_seq: torch.Tensor, states: Sequence[LifState] | None = None):
        """Run ``x_seq`` of shape ``[T, B, 2, H, W]``.

        Returns latent spikes ``[T, B, L]``, output membranes and output spikes
        ``[T, B, 2, H, W]``, and the final states.
        """
        if states is None:
            states = self.init_states(x_seq.shape[1], x_seq.dtype)
        latents, membranes, spikes = [], [], []
        for x_t in x_seq:
            out = self.step(x_t, states)
            states = out.states
            latents.append(out.latent_spikes)
            membranes.append(out.out_membrane)
            spikes.append(out.out_spikes)
        return torch.stack(latents), torch.stack(membranes), torch.stack(spikes), states


def sae_forward_step(model: SpikingAutoencoder, x_t, states):
    """Functional alias of :meth:`SpikingAutoencoder.step`."""
    return model.step(x_t, states)


def minmax_normalize(img: torch.Tensor) -> torch.Tensor:
    """Scale each trailing ``[H, W]`` image to [0, 1]; flat images map to zero."""
    flat = img.flatten(-2)
    lo = flat.min(-1, keepdim=True).values.unsqueeze(-1)
    hi = flat.max(-1, keepdim=True).values.unsqueeze(-1)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    # a flat image is exactly zero here but still passes gradient, so a silent network can recover
    return (img - lo) / safe


def accumulate_membrane(traces) -> torch.Tensor:
    """Sum the positive-channel output membrane over time and min-max normalise.

    ``traces`` has shape ``[T, ..., 2, H, W]``; the result is ``[..., H, W]``.
    """
    traces = torch.as_tensor(traces)
    if traces.shape[0] < 1:
        raise ValueError("need at least one time step")
    return minmax_normalize(traces[..., 0, :, :].sum(0))


def export_latent(latent_spikes, path) -> None:
    """Write a ``[T, L]`` latent spike table as CSV with header ``neuron_0..neuron_{L-1}``."""
    arr = np.asarray(torch.as_tensor(latent_spikes).detach().cpu()).astype(np.int64)
    if arr.ndim != 2:
        raise ValueError("latent spikes must be [T, L]")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"neuron_{j}" for j in range(arr.shape[1])])
        writer.writerows(arr.tolist())


def read_latent(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError("empty latent CSV")
    return np.asarray(rows[1:], dtype=np.int64).reshape(-1, len(rows[0]))
