"""Per-sample simulation and preprocessing shared by the CLI and scripted runs."""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np
from scipy.ndimage import zoom

from .config import PipelineConfig
from .dvs import emulate
from .events import EventStream, SpikeTensor, segment_by_triggers
from .preprocess import apply_filters, bin_events, crop_roi
from .rng import derive_seed
from .scatter import IntensityFrame, TargetFrame, scene_triggers, simulate_frames


def prepare_mask(image, shape, threshold: float = 0.5) -> np.ndarray:
    """Resample a [0, 1] image to the detector grid and binarise it."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("dataset images must be 2-D")
    if img.shape != tuple(shape):
        img = zoom(img, (shape[0] / img.shape[0], shape[1] / img.shape[1]), order=1, grid_mode=True,
                   mode="grid-constant")
    return img >= threshold


def target_image(mask, bins) -> np.ndarray:
    """Block-average a detector-resolution mask down to the bin grid."""
    m = np.asarray(mask, dtype=np.float64)
    bh, bw = bins
    h, w = m.shape
    if h % bh or w % bw:
        raise ValueError(f"mask {w}x{h} not divisible into {bw}x{bh} bins")
    return m.reshape(bh, h // bh, bw, w // bw).mean(axis=(1, 3))


def sample_seed(cfg: PipelineConfig, index: int) -> int:
    return derive_seed(cfg.run.seed, int(index))


def beam_scale(cfg: PipelineConfig) -> float:
    """Expected detector weight per pixel for the unattenuated, unmasked beam."""
    sc = cfg.scene
    if sc.profile == "pencil":
        return float(sc.photons)
    return sc.photons * sc.pitch**2 / (math.pi * sc.beam_radius**2)


def flash_scene(cfg: PipelineConfig, mask):
    sc = cfg.scene
    frame = TargetFrame(np.asarray(mask, dtype=bool), sc.lead_us, sc.flash_us)
    return sc.scene((frame,))


def sample_frames(cfg: PipelineConfig, mask, index: int, clear: bool = False, jobs: int = 1):
    """Normalised intensity frames (1.0 = bare beam) for one flashed target.

    The clear-path variant reruns the same seeds through a zero-thickness slab.
    """
    phantom = replace(cfg.phantom, thickness=0.0) if clear else cfg.phantom
    scene = flash_scene(cfg, mask)
    frames = simulate_frames(phantom, scene, cfg.scene.photons, sample_seed(cfg, index), jobs)
    scale = beam_scale(cfg)
    frames = [IntensityFrame(f.pixels / scale, f.t) for f in frames]
    # trailing dark interval so background noise also covers the tail
    frames.append(IntensityFrame(frames[-1].pixels, frames[-1].t + cfg.scene.lead_us))
    return scene, frames


def simulate_sample(cfg: PipelineConfig, mask, index: int, clear: bool = False, jobs: int = 1) -> EventStream:
    scene, frames = sample_frames(cfg, mask, index, clear, jobs)
    dvs_seed = derive_seed(cfg.run.seed, int(index), 1)
    return emulate(frames, cfg.dvs, dvs_seed, scene_triggers(scene))


def preprocess_stream(cfg: PipelineConfig, stream: EventStream) -> SpikeTensor:
    """Trigger window, ROI, filter chain and binning for a single-flash recording.

    A recording without triggers is binned over its whole duration.
    """
    pre = cfg.preprocess
    if stream.triggers:
        segments = segment_by_triggers(stream)
        if len(segments) != 1:
            raise ValueError(f"expected one flash per recording, found {len(segments)}")
        stream = segments[0]
    stream = crop_roi(stream, pre.roi_rect(stream.sensor_dims))
    stream = apply_filters(stream, pre.filters, pre.filter_params())
    duration = stream.duration if len(stream) or stream.triggers else 2 * pre.time_steps
    return bin_events(stream, pre.bins[0], pre.bins[1], pre.time_steps, pre.mode, duration)


def tensor_batch(tensors) -> np.ndarray:
    """Stack ``[2, T, H, W]`` tensors into a ``[N, T, 2, H, W]`` float32 batch."""
    return np.stack([t.data for t in tensors]).transpose(0, 2, 1, 3, 4).astype(np.float32)
