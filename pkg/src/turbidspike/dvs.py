"""Dynamic vision sensor emulation from intensity frames."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .events import EventStream
from .scatter import IntensityFrame


@dataclass(frozen=True)
class DvsConfig:
    """Sensor knobs.  Thresholds are in natural-log intensity units."""

    contrast_threshold: float = math.log(1.25)
    threshold_mismatch_sigma: float = 0.02
    background_rate: float = 0.1  # noise events / pixel / s
    refractory: int = 220  # us
    intensity_floor: float = 1e-3

    def __post_init__(self):
        if self.contrast_threshold <= 0:
            raise ValueError("contrast threshold must be positive")
        if self.refractory < 0:
            raise ValueError("refractory period must be non-negative")
        if self.threshold_mismatch_sigma < 0 or self.background_rate < 0:
            raise ValueError("mismatch sigma and background rate must be non-negative")
        if self.intensity_floor <= 0:
            raise ValueError("intensity floor must be positive")


@dataclass
class PixelState:
    log_memory: np.ndarray
    last_event_t: np.ndarray  # -inf before the first event


def set_threshold_percent(cfg: DvsConfig, percent: float) -> DvsConfig:
    """Return ``cfg`` with a relative contrast threshold of ``percent`` %."""
    if not 0 < percent < 100:
        raise ValueError("threshold percent must lie in (0, 100)")
    return replace(cfg, contrast_threshold=math.log1p(percent / 100.0))


def _crossings(level_prev, level_next, memory, theta, t0, t1):
    """Threshold crossings for one frame interval, vectorised over pixels.

    Returns flat pixel indices, event times, polarities and the updated memory.
    """
    delta = level_next - memory
    # tolerance so exact multiples of theta survive log round-off
    count = np.floor(np.abs(delta) / theta + 1e-9).astype(np.int64)
    sign = np.sign(delta).astype(np.int64)
    new_memory = memory + sign * count * theta
    pix = np.flatnonzero(count)
    if pix.size == 0:
        return pix, np.empty(0, np.int64), np.empty(0, np.int64), new_memory
    reps = count[pix]
    pix_rep = np.repeat(pix, reps)
    starts = np.cumsum(reps) - reps
    k = np.arange(reps.sum()) - np.repeat(starts, reps) + 1
    level = memory[pix_rep] + sign[pix_rep] * k * theta[pix_rep]
    span = level_next[pix_rep] - level_prev[pix_rep]
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = np.where(span != 0, (level - level_prev[pix_rep]) / span, 1.0)
    frac = np.clip(frac, 0.0, 1.0)
    t = t0 + np.floor(frac * (t1 - t0)).astype(np.int64)
    return pix_rep, t, sign[pix_rep], new_memory


def _apply_refractory(pix, t, last_t, refractory):
    """Greedy per-pixel suppression of events closer than ``refractory`` to the last kept one."""
    keep = np.zeros(pix.size, dtype=bool)
    if pix.size == 0:
        return keep
    order = np.lexsort((t, pix))
    sp, st = pix[order], t[order]
    first = np.r_[True, sp[1:] != sp[:-1]]
    rank = np.arange(sp.size) - np.maximum.accumulate(np.where(first, np.arange(sp.size), 0))
    sorted_keep = np.zeros(sp.size, dtype=bool)
    # walk every pixel's events in lock-step by their rank within the pixel
    for r in range(int(rank.max()) + 1):
        sel = np.flatnonzero(rank == r)
        ok = st[sel] - last_t[sp[sel]] >= refractory
        sorted_keep[sel] = ok
        last_t[sp[sel[ok]]] = st[sel[ok]]
    keep[order] = sorted_keep
    return keep


def emulate(
    frames: Sequence[IntensityFrame],
    cfg: DvsConfig = DvsConfig(),
    seed: int = 0,
    triggers: Sequence[tuple[int, str]] = (),
) -> EventStream:
    """Convert time-sorted intensity frames into a polarity event stream.

    Each pixel keeps a log-intensity memory initialised from the first frame.
    Between consecutive frames the log intensity is interpolated linearly and
    one event is emitted per threshold multiple crossed; the memory advances by
    the emitted multiples so sub-threshold residue carries over.  Events closer
    than the refractory period to the pixel's previous kept event are dropped.
    Poisson background events with random polarity are superposed.
    """
    if not frames:
        raise ValueError("need at least one frame")
    times = [int(f.t) for f in frames]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ValueError("frames must be time-sorted")
    shape = np.shape(frames[0].pixels)
    height, width = shape
    rng = np.random.default_rng(seed)
    theta = cfg.contrast_threshold * np.ones(height * width)
    if cfg.threshold_mismatch_sigma > 0:
        theta *= 1.0 + cfg.threshold_mismatch_sigma * rng.standard_normal(height * width)
        theta = np.maximum(theta, 1e-3 * cfg.contrast_threshold)

    def log_frame(frame):
        px = np.asarray(frame.pixels, dtype=np.float64)
        if px.shape != shape:
            raise ValueError("frames differ in shape")
        if np.any(px < 0):
            raise ValueError("negative intensity")
        return np.log(px.ravel() + cfg.intensity_floor)

    level = log_frame(frames[0])
    state = PixelState(level.copy(), np.full(height * width, -np.inf))
    pix_all, t_all, p_all = [], [], []
    for prev, frame in zip(frames[:-1], frames[1:]):
        nxt = log_frame(frame)
        pix, t, p, state.log_memory = _crossings(level, nxt, state.log_memory, theta, prev.t, frame.t)
        keep = _apply_refractory(pix, t, state.last_event_t, cfg.refractory)
        pix_all.append(pix[keep])
        t_all.append(t[keep])
        p_all.append(p[keep])
        level = nxt

    t_start, t_end = times[0], times[-1]
    if cfg.background_rate > 0 and t_end > t_start:
        lam = cfg.background_rate * (t_end - t_start) * 1e-6
        n_noise = rng.poisson(lam, size=height * width)
        pix = np.repeat(np.arange(height * width), n_noise)
        pix_all.append(pix)
        t_all.append(rng.integers(t_start, t_end, size=pix.size, endpoint=True))
        p_all.append(rng.choice(np.array([-1, 1]), size=pix.size))

    pix = np.concatenate(pix_all) if pix_all else np.empty(0, np.int64)
    t = np.concatenate(t_all) if t_all else np.empty(0, np.int64)
    p = np.concatenate(p_all) if p_all else np.empty(0, np.int64)
    return EventStream(t, pix % width, pix // width, p, (width, height), triggers, sort=True)
