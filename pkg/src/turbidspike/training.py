"""Surrogate-gradient BPTT training of the spiking autoencoder, checkpoints and gradient checks."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .snn import (
    SAEConfig,
    SpikingAutoencoder,
    accumulate_membrane,
    surrogate_grad,
    surrogate_sigma,
)

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "TrainResult",
    "bptt_train",
    "gradcheck",
    "load_checkpoint",
    "membrane_mse",
    "save_checkpoint",
    "surrogate_grad",
    "surrogate_sigma",
    "van_rossum",
]

LOSSES = ("membrane_mse", "van_rossum")
PERSISTENCE = ("reset_per_sample", "persist_across_samples")


class NumericFailure(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "membrane_mse"
    surrogate_slope: float = 2.0
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 16
    epochs: int = 10
    time_steps: int = 50
    tau_vr: float = 5.0  # time steps
    seed: int = 0
    membrane_persistence: str = "reset_per_sample"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.membrane_persistence not in PERSISTENCE:
            raise ValueError(f"membrane_persistence must be one of {PERSISTENCE}")
        if self.surrogate_slope <= 0 or self.tau_vr <= 0 or self.time_steps < 1:
            raise ValueError("need surrogate_slope > 0, tau_vr > 0 and time_steps >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.learning_rate < 0:
            raise ValueError("invalid batch size, epoch count or learning rate")


# ----------------------------------------------------------------- losses

def van_rossum_sq(a: torch.Tensor, b: torch.Tensor, tau: float, dt: float = 1.0) -> torch.Tensor:
    """Squared van Rossum distance between spike-count trains on a regular grid.

    ``a`` and ``b`` are ``[T, ...]`` (time first).  Each train is filtered with
    the causal kernel ``exp(-t / tau)`` by exact per-step recursion; between
    grid points the difference decays exponentially, so the integral
    ``(1/tau) * int (f_a - f_b)^2 dt`` is evaluated in closed form per interval,
    with the analytic tail after the last step.  Summed over all neurons.
    """
    diff = torch.as_tensor(a) - torch.as_tensor(b)
    decay = math.exp(-dt / tau)
    interval = 0.5 * (1.0 - math.exp(-2.0 * dt / tau))
    f = torch.zeros_like(diff[0])
    total = torch.zeros((), dtype=diff.dtype)
    n_steps = diff.shape[0]
    for n in range(n_steps):
        f = f * decay + diff[n]
        weight = interval if n < n_steps - 1 else 0.5
        total = total + weight * (f * f).sum()
    return total


def van_rossum(train_a, train_b, tau: float, dt: float = 1.0) -> float:
    """van Rossum distance between spike trains given as ``[T, ...]`` count arrays."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    a = torch.as_tensor(np.asarray(train_a, dtype=np.float64))
    b = torch.as_tensor(np.asarray(train_b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("trains must share a horizon and neuron layout")
    return float(torch.sqrt(torch.clamp(van_rossum_sq(a, b, tau, dt), min=0.0)))


def membrane_mse(image, target):
    """Mean squared per-pixel difference (torch tensors keep their graph)."""
    if isinstance(image, torch.Tensor) or isinstance(target, torch.Tensor):
        image, target = torch.as_tensor(image), torch.as_tensor(target)
        if image.shape != target.shape:
            raise ValueError(f"shape mismatch {tuple(image.shape)} vs {tuple(target.shape)}")
        return ((image - target) ** 2).mean()
    image, target = np.asarray(image, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if image.shape != target.shape:
        raise ValueError(f"shape mismatch {image.shape} vs {target.shape}")
    return float(np.mean((image - target) ** 2))


def batch_loss(model: SpikingAutoencoder, x: torch.Tensor, target: torch.Tensor, cfg: TrainConfig,
               states=None):
    """Forward a ``[T, B, 2, H, W]`` batch and return ``(loss, final_states)``."""
    _, membranes, spikes, states = model(x, states)
    if cfg.loss == "membrane_mse":
        recon = accumulate_membrane(membranes)
        loss = membrane_mse(recon, target)
    else:
        # per-sample distance, averaged over the batch
        loss = van_rossum_sq(spikes, target, cfg.tau_vr) / x.shape[1]
    return loss, states


# --------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: SpikingAutoencoder
    optimizer: torch.optim.Optimizer
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (epoch, train, val)
    step_losses: list[float] = field(default_factory=list)
    epoch: int = 0


def make_optimizer(model: SpikingAutoencoder, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas)


def _as_float_tensor(arr) -> torch.Tensor:
    return torch.as_tensor(np.asarray(arr), dtype=torch.float32)


def _batch(inputs, targets, index, cfg: TrainConfig):
    x = _as_float_tensor(inputs[index]).permute(1, 0, 2, 3, 4)  # [N,T,2,H,W] -> [T,B,2,H,W]
    y = _as_float_tensor(targets[index])
    if cfg.loss == "van_rossum":
        y = y.permute(1, 0, 2, 3, 4)
    return x, y


def evaluate_loss(model, inputs, targets, cfg: TrainConfig) -> float:
    if len(inputs) == 0:
        return float("nan")
    total, n = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(inputs), cfg.batch_size):
            idx = np.arange(lo, min(lo + cfg.batch_size, len(inputs)))
            x, y = _batch(inputs, targets, idx, cfg)
            loss, _ = batch_loss(model, x, y, cfg)
            total += float(loss) * len(idx)
            n += len(idx)
    return total / n


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Sample order for an epoch; a pure function of (seed, epoch) so resumed runs match."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def bptt_train(
    inputs,
    targets,
    cfg: TrainConfig,
    model: SpikingAutoencoder | None = None,
    sae_cfg: SAEConfig | None = None,
    val: tuple | None = None,
    resume: TrainResult | None = None,
    on_epoch: Callable[[TrainResult], None] | None = None,
) -> TrainResult:
    """Train with backpropagation through time.

    ``inputs`` is ``[N, T, 2, H, W]`` (binary spikes); ``targets`` is ``[N, H, W]``
    images for ``membrane_mse`` or ``[N, T, 2, H, W]`` spike tensors for
    ``van_rossum``.  Each batch runs all ``T`` steps carrying LIF states, the
    loss is taken on the accumulated output, and Adam updates the weights.
    """
    inputs = np.asarray(inputs)
    targets = np.asarray(targets)
    if len(inputs) == 0:
        raise ValueError("empty training set")
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    expected_target_ndim = 3 if cfg.loss == "membrane_mse" else 5
    if targets.ndim != expected_target_ndim:
        raise ValueError(f"{cfg.loss} needs {expected_target_ndim}-d targets, got {targets.ndim}-d")

    if resume is None:
        torch.manual_seed(cfg.seed)
        if model is None:
            gen = torch.Generator().manual_seed(cfg.seed)
            model = SpikingAutoencoder(sae_cfg or SAEConfig.for_input(inputs.shape[-1]), cfg.surrogate_slope,
                                       generator=gen)
        result = TrainResult(model, make_optimizer(model, cfg))
    else:
        result = resume
    model = result.model
    model.slope = cfg.surrogate_slope
    opt = result.optimizer

    for epoch in range(result.epoch + 1, cfg.epochs + 1):
        model.train()
        order = epoch_order(len(inputs), cfg.seed, epoch)
        states = None
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            if len(idx) == 0:
                raise ValueError("empty batch")
            x, y = _batch(inputs, targets, idx, cfg)
            carry = None
            if cfg.membrane_persistence == "persist_across_samples" and states is not None:
                carry = [type(s)(s.i[: len(idx)].detach(), s.u[: len(idx)].detach()) for s in states]
                if carry[0].u.shape[0] != len(idx):
                    carry = None
            opt.zero_grad(set_to_none=True)
            loss, states = batch_loss(model, x, y, cfg, carry)
            if not torch.isfinite(loss):
                raise NumericFailure(f"non-finite loss at epoch {epoch}, batch starting {lo}")
            loss.backward()
            opt.step()
            losses.append(loss.item())
            result.step_losses.append(loss.item())
        train_loss = float(np.mean(losses))
        val_loss = evaluate_loss(model, val[0], val[1], cfg) if val is not None else float("nan")
        result.history.append((epoch, train_loss, val_loss))
        result.epoch = epoch
        log.info("epoch %d train %.6f val %.6f", epoch, train_loss, val_loss)
        if on_epoch is not None:
            on_epoch(result)
    return result


def write_loss_history(history, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in history:
            writer.writerow([epoch, repr(float(tr)), repr(float(va))])


def read_loss_history(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(int(e), float(tr), float(va)) for e, tr, va in rows]


# ------------------------------------------------------------ grad check

def gradcheck(
    model: SpikingAutoencoder | None = None,
    sample: torch.Tensor | None = None,
    target: torch.Tensor | None = None,
    step: float = 1e-4,
    slope: float = 2.0,
    seed: int = 0,
    atol: float = 1e-7,
) -> float:
    """Max relative error between BPTT gradients and central finite differences.

    Runs in smooth mode (forward spikes replaced by the arctangent sigmoid) in
    float64.  Defaults to a ``[2, 4, 4]`` input, one convolution, a 4-neuron
    latent layer and ``T = 3`` steps.  Relative error per element is
    ``|g_bp - g_fd| / max(|g_bp|, |g_fd|, atol)``.
    """
    gen = torch.Generator().manual_seed(seed)
    if model is None:
        cfg = SAEConfig(input_shape=(2, 4, 4), channels=(3,), latent_dim=4, theta_out=1.0)
        model = SpikingAutoencoder(cfg, slope=slope, generator=gen)
    model = model.double()
    model.smooth = True
    model.slope = slope
    shape = model.cfg.input_shape
    if sample is None:
        sample = (torch.rand((3, 1, *shape), generator=gen, dtype=torch.float64) < 0.5).double()
    if target is None:
        target = torch.rand((1, *shape[1:]), generator=gen, dtype=torch.float64)
    with torch.no_grad():
        for p in model.parameters():
            # non-zero biases so every parameter receives gradient
            if p.dim() == 1:
                p.uniform_(-0.5, 0.5, generator=gen)

    def loss_fn():
        _, membranes, _, _ = model(sample)
        return membrane_mse(accumulate_membrane(membranes), target)

    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            analytic = p.grad.detach().clone()
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                up = loss_fn().item()
                flat[j] = orig - step
                down = loss_fn().item()
                flat[j] = orig
                numeric = (up - down) / (2 * step)
                a = analytic.view(-1)[j].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
                worst = max(worst, err)
    return worst


# ------------------------------------------------------------- checkpoint

CHECKPOINT_MAGIC = b"NCI1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_tensor(fh, name: str, tensor: torch.Tensor) -> None:
    data = tensor.detach().cpu().to(torch.float32).numpy()
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)) + raw)
    fh.write(struct.pack("<B", data.ndim))
    fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
    fh.write(data.astype("<f4").tobytes())


def _read_tensor(buf: memoryview, off: int):
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    name = bytes(buf[off : off + n]).decode("utf-8")
    off += n
    (rank,) = struct.unpack_from("<B", buf, off)
    off += 1
    dims = struct.unpack_from(f"<{rank}I", buf, off)
    off += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if off + 4 * count > len(buf):
        raise CheckpointError("truncated tensor record")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
    off += 4 * count
    return name, torch.from_numpy(arr.copy()), off


def save_checkpoint(path, result: TrainResult, train_cfg: TrainConfig, extra: dict | None = None) -> None:
    """``NCI1`` checkpoint: config blob, parameters, Adam moments, epoch and RNG state."""
    model, opt = result.model, result.optimizer
    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())
    adam_steps = {}
    moments = []
    for name in names:
        st = opt.state.get(params[name], {})
        if st:
            adam_steps[name] = int(st["step"])
            moments.append((f"exp_avg/{name}", st["exp_avg"]))
            moments.append((f"exp_avg_sq/{name}", st["exp_avg_sq"]))
    blob = {
        "sae": model.cfg.to_dict(),
        "train": asdict(train_cfg),
        "adam_steps": adam_steps,
        "extra": extra or {},
    }
    config_raw = json.dumps(blob, sort_keys=True).encode("utf-8")
    rng_raw = torch.get_rng_state().numpy().tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(config_raw)) + config_raw)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            _write_tensor(fh, name, params[name])
        fh.write(struct.pack("<I", len(moments)))
        for name, tensor in moments:
            _write_tensor(fh, name, tensor)
        fh.write(struct.pack("<Q", result.epoch))
        fh.write(struct.pack("<I", len(rng_raw)) + rng_raw)


@dataclass
class Checkpoint:
    sae: SAEConfig
    train: TrainConfig
    params: dict[str, torch.Tensor]
    moments: dict[str, torch.Tensor]
    adam_steps: dict[str, int]
    epoch: int
    rng_state: bytes
    extra: dict

    def build_model(self) -> SpikingAutoencoder:
        model = SpikingAutoencoder(self.sae, self.train.surrogate_slope)
        expected = dict(model.named_parameters())
        if set(expected) != set(self.params):
            raise CheckpointError("checkpoint parameters do not match the SAE configuration")
        with torch.no_grad():
            for name, p in expected.items():
                if tuple(p.shape) != tuple(self.params[name].shape):
                    raise CheckpointError(f"shape mismatch for {name}")
                p.copy_(self.params[name])
        return model

    def to_result(self) -> TrainResult:
        """Rebuild model, Adam state and global RNG so training can resume exactly."""
        model = self.build_model()
        opt = make_optimizer(model, self.train)
        for name, p in model.named_parameters():
            if name in self.adam_steps:
                opt.state[p] = {
                    "step": torch.tensor(float(self.adam_steps[name])),
                    "exp_avg": self.moments[f"exp_avg/{name}"].clone(),
                    "exp_avg_sq": self.moments[f"exp_avg_sq/{name}"].clone(),
                }
        torch.set_rng_state(torch.from_numpy(np.frombuffer(self.rng_state, dtype=np.uint8).copy()))
        return TrainResult(model, opt, epoch=self.epoch)


def load_checkpoint(path, sae_cfg: SAEConfig | None = None) -> Checkpoint:
    buf = memoryview(Path(path).read_bytes())
    if bytes(buf[:4]) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack_from("<I", buf, 8)
        off = 12
        blob = json.loads(bytes(buf[off : off + n]).decode("utf-8"))
        off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = {}
        for _ in range(count):
            name, tensor, off = _read_tensor(buf, off)
            params[name] = tensor
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        moments = {}
        for _ in range(count):
            name, tensor, off = _read_tensor(buf, off)
            moments[name] = tensor
        (epoch,) = struct.unpack_from("<Q", buf, off)
        off += 8
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + n != len(buf):
            raise CheckpointError("truncated or trailing bytes in checkpoint")
        rng_state = bytes(buf[off : off + n])
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    sae = SAEConfig.from_dict(blob["sae"])
    if sae_cfg is not None and sae != sae_cfg:
        raise CheckpointError("checkpoint SAE configuration differs from the requested one")
    train = TrainConfig(**blob["train"])
    ckpt = Checkpoint(sae, train, params, moments, blob.get("adam_steps", {}), epoch, rng_state,
                      blob.get("extra", {}))
    ckpt.build_model()
    return ckpt
