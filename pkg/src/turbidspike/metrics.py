"""Image-quality metrics, spike rasters and batch evaluation reports."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .events import SpikeTensor
from .training import membrane_mse


@dataclass(frozen=True)
class SsimConfig:
    window: int = 7
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("SSIM window must be odd and >= 3")
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("K1 and K2 must be positive")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _valid_filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[half:-half, half:-half]


def ssim_map(a, b, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    """Per-window SSIM over all window positions fully inside the image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < cfg.window:
        raise ValueError("image smaller than the SSIM window")
    g = gaussian_window(cfg.window, cfg.sigma)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    mu_a, mu_b = _valid_filter(a, g), _valid_filter(b, g)
    var_a = _valid_filter(a * a, g) - mu_a**2
    var_b = _valid_filter(b * b, g) - mu_b**2
    cov = _valid_filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean Gaussian-windowed SSIM (7x7, sigma 1.5 by default)."""
    a = np.asarray(a, dtype=np.float64)
    if np.array_equal(a, np.asarray(b, dtype=np.float64)):
        return 1.0
    return float(ssim_map(a, b, cfg).mean())


def mse_metric(a, b) -> float:
    return float(membrane_mse(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)))


def minmax(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


def spike_image(tensor) -> np.ndarray:
    """Per-pixel spike total over both polarities and all steps, min-max normalised."""
    data = tensor.data if isinstance(tensor, SpikeTensor) else np.asarray(tensor)
    return minmax(data.sum(axis=(0, 1)))


# ------------------------------------------------------------------ raster

def raster_pairs(spikes) -> np.ndarray:
    """``(neuron, step)`` pairs with neuron = y * W + x, polarities merged.

    Accepts a :class:`SpikeTensor`, a ``[2, T, H, W]`` or a ``[T, H, W]`` array.
    """
    data = spikes.data if isinstance(spikes, SpikeTensor) else np.asarray(spikes)
    if data.ndim == 4:
        data = data.sum(axis=0)
    if data.ndim != 3:
        raise ValueError("raster input must be [2, T, H, W] or [T, H, W]")
    step, yy, xx = np.nonzero(data)
    neuron = yy * data.shape[2] + xx
    pairs = np.unique(np.stack([neuron, step], axis=1), axis=0) if len(step) else np.empty((0, 2), np.int64)
    order = np.lexsort((pairs[:, 0], pairs[:, 1])) if len(pairs) else []
    return pairs[order]


def raster_export(sets: Mapping[str, object], path) -> None:
    """Write named spike sets as CSV rows ``set_name, neuron, step``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["set_name", "neuron", "step"])
        for name, spikes in sets.items():
            for neuron, step in raster_pairs(spikes).tolist():
                writer.writerow([name, neuron, step])


def read_raster(path) -> dict[str, np.ndarray]:
    out: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for name, neuron, step in reader:
            out.setdefault(name, []).append((int(neuron), int(step)))
    return {k: np.asarray(v, dtype=np.int64) for k, v in out.items()}


# ------------------------------------------------------------------ images

def write_pgm(path, img) -> None:
    """Plain (P2) 8-bit PGM of an image with values in [0, 1]."""
    px = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.int64)
    h, w = px.shape
    lines = [f"P2\n{w} {h}\n255\n"]
    lines += [" ".join(map(str, row)) + "\n" for row in px.tolist()]
    Path(path).write_text("".join(lines), encoding="ascii")


def read_pgm(path) -> np.ndarray:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tokens += line.split("#", 1)[0].split()
    if tokens[0] != "P2":
        raise ValueError("not a plain PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    return np.asarray(tokens[4 : 4 + w * h], dtype=np.float64).reshape(h, w) / maxval


def image_grid(rows: Sequence[Sequence[np.ndarray]], gap: int = 1) -> np.ndarray:
    """Tile equally sized images row by row, separated by ``gap`` mid-grey pixels."""
    h, w = rows[0][0].shape
    n_cols = max(len(r) for r in rows)
    grid = np.full((len(rows) * (h + gap) - gap, n_cols * (w + gap) - gap), 0.5)
    for i, row in enumerate(rows):
        for j, img in enumerate(row):
            grid[i * (h + gap) : i * (h + gap) + h, j * (w + gap) : j * (w + gap) + w] = img
    return grid


# ------------------------------------------------------------------ report

@dataclass
class EvalReport:
    sample_ids: list[int] = field(default_factory=list)
    ssim_input: list[float] = field(default_factory=list)
    mse_input: list[float] = field(default_factory=list)
    ssim_recon: list[float] = field(default_factory=list)
    mse_recon: list[float] = field(default_factory=list)
    config_digest: str = ""
    inference_ms: list[float] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.sample_ids)

    def mean(self, column: str) -> float:
        return float(np.mean(getattr(self, column)))

    def add(self, sample_id, target, input_img, recon_img, cfg: SsimConfig = SsimConfig()):
        self.sample_ids.append(int(sample_id))
        self.ssim_input.append(ssim(input_img, target, cfg))
        self.mse_input.append(mse_metric(input_img, target))
        self.ssim_recon.append(ssim(recon_img, target, cfg))
        self.mse_recon.append(mse_metric(recon_img, target))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "ssim_input", "mse_input", "ssim_recon", "mse_recon"])
            for row in zip(self.sample_ids, self.ssim_input, self.mse_input, self.ssim_recon, self.mse_recon):
                writer.writerow([row[0], *(repr(float(v)) for v in row[1:])])

    @classmethod
    def read_csv(cls, path, config_digest: str = "") -> "EvalReport":
        rep = cls(config_digest=config_digest)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for sid, si, mi, sr, mr in reader:
                rep.sample_ids.append(int(sid))
                rep.ssim_input.append(float(si))
                rep.mse_input.append(float(mi))
                rep.ssim_recon.append(float(sr))
                rep.mse_recon.append(float(mr))
        return rep

    def summary(self) -> dict:
        return {
            "count": self.count,
            "config_digest": self.config_digest,
            **{f"mean_{c}": self.mean(c) for c in ("ssim_input", "mse_input", "ssim_recon", "mse_recon")},
        }


class DigestMismatch(ValueError):
    pass


def reconstruct(model, tensor_batch: np.ndarray) -> np.ndarray:
    """Accumulated-membrane reconstructions for ``[N, T, 2, H, W]`` inputs."""
    import torch

    from .snn import accumulate_membrane

    x = torch.as_tensor(np.asarray(tensor_batch), dtype=torch.float32).permute(1, 0, 2, 3, 4)
    with torch.no_grad():
        _, membranes, _, _ = model(x)
        return accumulate_membrane(membranes).numpy().astype(np.float64)


def reconstruct_spikes(model, tensor_batch: np.ndarray) -> np.ndarray:
    """Output-layer spikes ``[N, T, 2, H, W]`` for ``[N, T, 2, H, W]`` inputs."""
    import torch

    x = torch.as_tensor(np.asarray(tensor_batch), dtype=torch.float32).permute(1, 0, 2, 3, 4)
    with torch.no_grad():
        _, _, spikes, _ = model(x)
    return spikes.permute(1, 0, 2, 3, 4).numpy()


def evaluate_batch(
    model,
    inputs: np.ndarray,
    targets: np.ndarray,
    sample_ids: Sequence[int] | None = None,
    out_dir=None,
    config_digest: str = "",
    expected_digest: str | None = None,
    batch_size: int = 16,
    ssim_cfg: SsimConfig = SsimConfig(),
) -> EvalReport:
    """Run inference per sample and score (input vs target) and (reconstruction vs target).

    With ``out_dir`` the report CSV and a ``target | input | reconstruction``
    PGM grid are written there.
    """
    if expected_digest is not None and expected_digest != config_digest:
        raise DigestMismatch(f"checkpoint digest {expected_digest} != test-set digest {config_digest}")
    inputs = np.asarray(inputs)
    targets = np.asarray(targets, dtype=np.float64)
    ids = list(range(len(inputs))) if sample_ids is None else list(sample_ids)
    report = EvalReport(config_digest=config_digest)
    recons = []
    for lo in range(0, len(inputs), batch_size):
        t0 = time.perf_counter()
        rec = reconstruct(model, inputs[lo : lo + batch_size])
        per_sample = 1e3 * (time.perf_counter() - t0) / len(rec)
        for j, img in enumerate(rec):
            k = lo + j
            report.add(ids[k], targets[k], spike_image(inputs[k].transpose(1, 0, 2, 3)), img, ssim_cfg)
            report.inference_ms.append(per_sample)
            recons.append(img)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "report.csv")
        rows = [
            [targets[k], spike_image(inputs[k].transpose(1, 0, 2, 3)), recons[k]] for k in range(len(recons))
        ]
        if rows:
            write_pgm(out / "grid.pgm", image_grid(rows))
    return report
