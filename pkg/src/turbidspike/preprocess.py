"""Event preprocessing: region of interest, noise filters and spatio-temporal binning.

All filters evaluate support against their own input stream, so each one is a
pure function of that stream and never reorders events.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .events import EventStream, SpikeTensor


@dataclass(frozen=True)
class RoiRect:
    x0: int
    y0: int
    w: int
    h: int

    def __post_init__(self):
        if min(self.x0, self.y0) < 0 or min(self.w, self.h) <= 0:
            raise ValueError(f"invalid ROI {self}")

    def fits(self, sensor_dims) -> bool:
        return self.x0 + self.w <= sensor_dims[0] and self.y0 + self.h <= sensor_dims[1]


@dataclass(frozen=True)
class ActivityParams:
    dt_us: int = 10_000
    radius: int = 1


@dataclass(frozen=True)
class StcParams:
    dt_us: int = 10_000
    support: int = 1


@dataclass(frozen=True)
class AntiFlickerParams:
    f_min: float = 90.0
    f_max: float = 130.0
    min_cycles: int = 5


@dataclass(frozen=True)
class FilterParams:
    activity: ActivityParams = field(default_factory=ActivityParams)
    stc: StcParams = field(default_factory=StcParams)
    antiflicker: AntiFlickerParams = field(default_factory=AntiFlickerParams)

    def __post_init__(self):
        if self.activity.dt_us <= 0 or self.stc.dt_us <= 0:
            raise ValueError("filter windows must be positive")
        if self.activity.radius < 0 or self.stc.support < 0:
            raise ValueError("radius and support must be non-negative")
        if not 0 < self.antiflicker.f_min < self.antiflicker.f_max:
            raise ValueError("antiflicker band needs 0 < f_min < f_max")


def crop_roi(stream: EventStream, roi: RoiRect) -> EventStream:
    """Keep events inside ``roi`` (exclusive upper bounds), re-based to its origin."""
    if not roi.fits(stream.sensor_dims):
        raise ValueError(f"ROI {roi} exceeds sensor {stream.sensor_dims}")
    x = stream.x.astype(np.int64)
    y = stream.y.astype(np.int64)
    keep = (x >= roi.x0) & (x < roi.x0 + roi.w) & (y >= roi.y0) & (y < roi.y0 + roi.h)
    return EventStream(
        stream.t[keep], x[keep] - roi.x0, y[keep] - roi.y0, stream.p[keep], (roi.w, roi.h), stream.triggers
    )


def _pixel_groups(stream: EventStream):
    """Pixel keys plus a stable sort grouping events by pixel in stream order."""
    width = stream.sensor_dims[0]
    key = stream.y.astype(np.int64) * width + stream.x.astype(np.int64)
    order = np.argsort(key, kind="stable")
    return key, order


def activity_noise_filter(stream: EventStream, dt_us: int, radius: int = 1) -> EventStream:
    """Keep an event iff some earlier input event within ``dt_us`` lies within
    Chebyshev distance ``radius`` (its own pixel included)."""
    n = len(stream)
    if n == 0:
        return stream
    width, height = stream.sensor_dims
    key, order = _pixel_groups(stream)
    idx = np.arange(n, dtype=np.int64)
    # composite (pixel, stream index) keys sorted ascending
    comp = key[order] * n + order
    t = stream.t.astype(np.int64)
    x = stream.x.astype(np.int64)
    y = stream.y.astype(np.int64)
    keep = np.zeros(n, dtype=bool)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            nx, ny = x + dx, y + dy
            valid = (nx >= 0) & (nx < width) & (ny >= 0) & (ny < height) & ~keep
            if not np.any(valid):
                continue
            nkey = ny[valid] * width + nx[valid]
            pos = np.searchsorted(comp, nkey * n + idx[valid], side="left") - 1
            ok = pos >= 0
            pred = order[np.maximum(pos, 0)]
            ok &= key[pred] == nkey
            ok &= t[valid] - t[pred] <= dt_us
            keep[np.flatnonzero(valid)[ok]] = True
    return stream.select(keep)


def stc_filter(stream: EventStream, dt_us: int, support: int = 1) -> EventStream:
    """Keep an event iff at least ``support`` earlier events hit the same pixel within ``dt_us``."""
    n = len(stream)
    if n == 0 or support <= 0:
        return stream
    key, order = _pixel_groups(stream)
    sk = key[order]
    st = stream.t.astype(np.int64)[order]
    keep_sorted = np.zeros(n, dtype=bool)
    if n > support:
        # times are non-decreasing within a pixel, so the support-th predecessor is the oldest needed
        same = sk[support:] == sk[:-support]
        recent = st[support:] - st[:-support] <= dt_us
        keep_sorted[support:] = same & recent
    keep = np.zeros(n, dtype=bool)
    keep[order] = keep_sorted
    return stream.select(keep)


def antiflicker_filter(stream: EventStream, f_min: float, f_max: float, min_cycles: int = 5) -> EventStream:
    """Remove per-pixel runs of periodic polarity alternation in ``[f_min, f_max]`` Hz.

    Within a pixel, event ``j`` links to ``j-2`` when polarities alternate over
    ``j-2, j-1, j`` and ``t_j - t_{j-2}`` lies in ``[1/f_max, 1/f_min]``.  A
    maximal chain of links spanning ``m`` events covers ``(m - 1) // 2``
    complete periods; chains with at least ``min_cycles`` periods are removed.
    """
    if not 0 < f_min < f_max:
        raise ValueError("need 0 < f_min < f_max")
    n = len(stream)
    if n < 3:
        return stream
    key, order = _pixel_groups(stream)
    sk = key[order]
    st = stream.t.astype(np.int64)[order]
    sp = stream.p.astype(np.int64)[order]
    period = np.zeros(n, dtype=np.int64)
    period[2:] = st[2:] - st[:-2]
    link = np.zeros(n, dtype=bool)
    link[2:] = (
        (sk[2:] == sk[:-2])
        & (sp[2:] != sp[1:-1])
        & (sp[1:-1] != sp[:-2])
        & (period[2:] * f_max >= 1e6)
        & (period[2:] * f_min <= 1e6)
    )
    remove = np.zeros(n, dtype=bool)
    if np.any(link):
        # runs of consecutive links j = a..b cover events a-2..b
        edges = np.diff(np.r_[0, link.astype(np.int8), 0])
        starts = np.flatnonzero(edges == 1)
        stops = np.flatnonzero(edges == -1) - 1
        for a, b in zip(starts, stops):
            m = b - a + 3
            if (m - 1) // 2 >= min_cycles:
                remove[a - 2 : b + 1] = True
    keep = np.ones(n, dtype=bool)
    keep[order] = ~remove
    return stream.select(keep)


def bin_events(
    stream: EventStream,
    height: int,
    width: int,
    n_steps: int,
    mode: str = "binary",
    duration_us: int | None = None,
) -> SpikeTensor:
    """Bin a stream into a ``[2, T, H, W]`` spike tensor.

    Spatial bin is ``x // (w / W)``; temporal bin is ``min(t * T // D, T - 1)``
    with ``D`` the recording duration (defaults to ``stream.duration``).
    """
    w, h = stream.sensor_dims
    if w % width or h % height:
        raise ValueError(f"sensor {w}x{h} not divisible into {width}x{height} bins")
    duration = stream.duration if duration_us is None else int(duration_us)
    if duration <= 0:
        raise ValueError("recording duration must be positive")
    if mode not in ("count", "binary"):
        raise ValueError(f"unknown binning mode {mode!r}")
    sx, sy = w // width, h // height
    data = np.zeros((2, n_steps, height, width), dtype=np.int64)
    if len(stream):
        t = stream.t.astype(np.int64)
        step = np.minimum(t * n_steps // duration, n_steps - 1)
        ch = (stream.p < 0).astype(np.int64)
        np.add.at(data, (ch, step, stream.y.astype(np.int64) // sy, stream.x.astype(np.int64) // sx), 1)
    if mode == "binary":
        np.minimum(data, 1, out=data)
    elif data.max(initial=0) > np.iinfo(np.uint16).max:
        raise OverflowError("spike count exceeds u16 storage")
    return SpikeTensor(data, mode, duration)


FILTERS = ("activity", "stc", "antiflicker")


def apply_filters(stream: EventStream, chain: Sequence[str], params: FilterParams = FilterParams()) -> EventStream:
    for name in chain:
        if name == "activity":
            stream = activity_noise_filter(stream, params.activity.dt_us, params.activity.radius)
        elif name == "stc":
            stream = stc_filter(stream, params.stc.dt_us, params.stc.support)
        elif name == "antiflicker":
            af = params.antiflicker
            stream = antiflicker_filter(stream, af.f_min, af.f_max, af.min_cycles)
        else:
            raise ValueError(f"unknown filter {name!r}; choose from {FILTERS}")
    return stream


# --------------------------------------------------------- tensor archive

ARCHIVE_MAGIC = b"SPT1"


def write_tensor_archive(path, tensors: Sequence[SpikeTensor], labels: Sequence[int]) -> None:
    """``SPT1`` archive: u32 sample count, then per sample u32 label, u8 mode,
    u16 T, u16 H, u16 W, u64 duration and either a packed bitset (binary) or u16 counts."""
    if len(tensors) != len(labels):
        raise ValueError("one label per tensor required")
    with open(path, "wb") as fh:
        fh.write(ARCHIVE_MAGIC + struct.pack("<I", len(tensors)))
        for tensor, label in zip(tensors, labels):
            _, n_steps, height, width = tensor.shape
            binary = tensor.mode == "binary"
            fh.write(struct.pack("<IBHHHQ", int(label), int(binary), n_steps, height, width, tensor.duration_us))
            if binary:
                fh.write(np.packbits(tensor.data.astype(np.uint8).ravel(), bitorder="little").tobytes())
            else:
                fh.write(tensor.data.astype("<u2").tobytes())


def read_tensor_archive(path) -> tuple[list[SpikeTensor], np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != ARCHIVE_MAGIC:
        raise ValueError("not an SPT1 tensor archive")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    tensors, labels = [], []
    head = struct.calcsize("<IBHHHQ")
    for _ in range(count):
        if off + head > len(buf):
            raise ValueError("truncated tensor archive")
        label, binary, n_steps, height, width, duration = struct.unpack_from("<IBHHHQ", buf, off)
        off += head
        size = 2 * n_steps * height * width
        shape = (2, n_steps, height, width)
        nbytes = (size + 7) // 8 if binary else 2 * size
        if off + nbytes > len(buf):
            raise ValueError("truncated tensor archive")
        if binary:
            bits = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, off), count=size, bitorder="little")
            data = bits.reshape(shape)
        else:
            data = np.frombuffer(buf, "<u2", size, off).reshape(shape)
        off += nbytes
        tensors.append(SpikeTensor(data.copy(), "binary" if binary else "count", duration))
        labels.append(label)
    return tensors, np.asarray(labels, dtype=np.int64)
