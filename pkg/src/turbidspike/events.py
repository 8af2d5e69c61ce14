"""Event and spike-tensor types, event file codecs and trigger segmentation."""

from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

RISE = "rise"
FALL = "fall"
_EDGE_CODE = {RISE: 1, FALL: 0}
_CODE_EDGE = {1: RISE, 0: FALL}

BINARY_MAGIC = b"EVT1"
TEXT_HEADER = "# evt v1"
EVENT_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


class EventFormatError(ValueError):
    """Malformed or invalid event data."""


class SegmentationError(ValueError):
    """Trigger sequence violates the rise/fall protocol."""


@dataclass(frozen=True)
class Event:
    t: int
    x: int
    y: int
    p: int

    def __post_init__(self):
        if self.p not in (1, -1):
            raise EventFormatError(f"polarity must be +1 or -1, got {self.p}")
        if self.t < 0 or self.x < 0 or self.y < 0:
            raise EventFormatError("t, x and y must be non-negative")


def _sort_order(t, x, y, p) -> np.ndarray:
    # np.lexsort uses the last key as primary
    return np.lexsort((p, x, y, t))


def _is_sorted(t, x, y, p) -> bool:
    if len(t) < 2:
        return True
    t_prev, t_next = t[:-1], t[1:]
    if np.any(t_next < t_prev):
        return False
    tie = t_next == t_prev
    if not np.any(tie):
        return True
    key_prev = np.stack([y[:-1], x[:-1], p[:-1]], axis=1).astype(np.int64)[tie]
    key_next = np.stack([y[1:], x[1:], p[1:]], axis=1).astype(np.int64)[tie]
    # lexicographic comparison row by row
    diff = key_next - key_prev
    first_nonzero = np.argmax(diff != 0, axis=1)
    vals = diff[np.arange(len(diff)), first_nonzero]
    return bool(np.all(vals >= 0))


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered polarity events on a ``width x height`` sensor.

    Events are held column-wise (``t``, ``x``, ``y``, ``p``).  Ordering is
    by ``t`` and then ``(y, x, p)`` for ties, which keeps every downstream
    operation deterministic.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sensor_dims: tuple[int, int]
    triggers: tuple[tuple[int, str], ...] = field(default=())

    def __init__(self, t=(), x=(), y=(), p=(), sensor_dims=(1, 1), triggers=(), *, sort=False):
        t = np.asarray(t, dtype=np.uint64).ravel()
        x = np.asarray(x, dtype=np.int64).ravel()
        y = np.asarray(y, dtype=np.int64).ravel()
        p = np.asarray(p, dtype=np.int64).ravel()
        if not (len(t) == len(x) == len(y) == len(p)):
            raise EventFormatError("event columns differ in length")
        width, height = int(sensor_dims[0]), int(sensor_dims[1])
        if width <= 0 or height <= 0 or width > 0xFFFF or height > 0xFFFF:
            raise EventFormatError(f"invalid sensor dims {sensor_dims}")
        if len(p) and not np.all((p == 1) | (p == -1)):
            raise EventFormatError("polarity must be +1 or -1")
        if len(x) and (x.min() < 0 or y.min() < 0 or x.max() >= width or y.max() >= height):
            raise EventFormatError("event coordinates outside sensor")
        x = x.astype(np.uint16)
        y = y.astype(np.uint16)
        p = p.astype(np.int8)
        if sort:
            order = _sort_order(t, x, y, p)
            t, x, y, p = t[order], x[order], y[order], p[order]
        elif not _is_sorted(t, x, y, p):
            raise EventFormatError("events not in (t, y, x, p) order")
        trig = []
        for tt, edge in triggers:
            if edge not in _EDGE_CODE:
                raise EventFormatError(f"unknown trigger edge {edge!r}")
            if int(tt) < 0:
                raise EventFormatError("negative trigger time")
            trig.append((int(tt), edge))
        trig.sort(key=lambda item: item[0])
        for arr in (t, x, y, p):
            arr.setflags(write=False)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "sensor_dims", (width, height))
        object.__setattr__(self, "triggers", tuple(trig))

    @classmethod
    def from_events(cls, events: Iterable[Event], sensor_dims, triggers=(), sort=True):
        events = list(events)
        return cls(
            [e.t for e in events],
            [e.x for e in events],
            [e.y for e in events],
            [e.p for e in events],
            sensor_dims,
            triggers,
            sort=sort,
        )

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self):
        for t, x, y, p in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(t, x, y, p)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.sensor_dims == other.sensor_dims
            and self.triggers == other.triggers
            and all(np.array_equal(a, b) for a, b in zip(self.columns(), other.columns()))
        )

    def columns(self):
        return self.t, self.x, self.y, self.p

    def select(self, mask: np.ndarray) -> "EventStream":
        """Sub-stream of the events where ``mask`` is true (order preserved)."""
        mask = np.asarray(mask, dtype=bool)
        return EventStream(
            self.t[mask], self.x[mask], self.y[mask], self.p[mask], self.sensor_dims, self.triggers
        )

    @property
    def duration(self) -> int:
        """Recording length: last falling trigger if present, otherwise last event time + 1."""
        falls = [t for t, e in self.triggers if e == FALL]
        if falls:
            return int(falls[-1])
        return int(self.t[-1]) + 1 if len(self.t) else 0

    def __repr__(self) -> str:
        return f"EventStream(n={len(self)}, sensor_dims={self.sensor_dims}, triggers={len(self.triggers)})"


def merge_streams(streams: Sequence[EventStream]) -> EventStream:
    dims = streams[0].sensor_dims
    if any(s.sensor_dims != dims for s in streams):
        raise EventFormatError("cannot merge streams with different sensor dims")
    cols = [np.concatenate([s.columns()[i] for s in streams]) for i in range(4)]
    trig = [tr for s in streams for tr in s.triggers]
    return EventStream(*cols, sensor_dims=dims, triggers=trig, sort=True)


@dataclass(frozen=True, eq=False)
class SpikeTensor:
    """Dense binned spikes ``[2, T, H, W]``; channel 0 is p=+1, channel 1 is p=-1."""

    data: np.ndarray
    mode: str
    duration_us: int

    def __post_init__(self):
        if self.mode not in ("count", "binary"):
            raise ValueError(f"unknown mode {self.mode!r}")
        data = np.asarray(self.data)
        if data.ndim != 4 or data.shape[0] != 2:
            raise ValueError(f"spike tensor must have shape [2, T, H, W], got {data.shape}")
        if np.any(data < 0):
            raise ValueError("spike counts must be non-negative")
        if self.mode == "binary" and np.any(data > 1):
            raise ValueError("binary spike tensor holds values outside {0, 1}")
        object.__setattr__(self, "data", data.astype(np.uint16, copy=False))

    @property
    def shape(self):
        return self.data.shape

    @property
    def dt(self) -> float:
        """Time-step width in microseconds."""
        return self.duration_us / self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpikeTensor):
            return NotImplemented
        return (
            self.mode == other.mode
            and self.duration_us == other.duration_us
            and np.array_equal(self.data, other.data)
        )


# ----------------------------------------------------------------- codecs

def _write_text(stream: EventStream, fh) -> None:
    w, h = stream.sensor_dims
    fh.write(f"{TEXT_HEADER} {w} {h}\n")
    triggers = list(stream.triggers)
    ti = 0
    for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
        while ti < len(triggers) and triggers[ti][0] <= t:
            fh.write(f"# trig {triggers[ti][0]} {triggers[ti][1]}\n")
            ti += 1
        fh.write(f"{t},{x},{y},{p}\n")
    for tt, edge in triggers[ti:]:
        fh.write(f"# trig {tt} {edge}\n")


def _read_text(text: str, sort: bool) -> EventStream:
    lines = text.splitlines()
    if not lines:
        raise EventFormatError("empty event file")
    head = lines[0].split()
    if len(head) != 5 or " ".join(head[:3]) != TEXT_HEADER:
        raise EventFormatError(f"bad header line: {lines[0]!r}")
    try:
        dims = (int(head[3]), int(head[4]))
    except ValueError as exc:
        raise EventFormatError(f"bad header line: {lines[0]!r}") from exc
    ts, xs, ys, ps, triggers = [], [], [], [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line.split()
            if len(parts) == 4 and parts[1] == "trig" and parts[3] in _EDGE_CODE and parts[2].isdigit():
                triggers.append((int(parts[2]), parts[3]))
                continue
            raise EventFormatError(f"line {lineno}: unrecognised directive {line!r}")
        fields = line.split(",")
        if len(fields) != 4:
            raise EventFormatError(f"line {lineno}: expected t,x,y,p")
        try:
            t, x, y, p = (int(f) for f in fields)
        except ValueError as exc:
            raise EventFormatError(f"line {lineno}: non-integer field") from exc
        if p not in (1, -1):
            raise EventFormatError(f"line {lineno}: polarity {p} not in {{1, -1}}")
        if t < 0:
            raise EventFormatError(f"line {lineno}: negative timestamp")
        ts.append(t)
        xs.append(x)
        ys.append(y)
        ps.append(p)
    return EventStream(ts, xs, ys, ps, dims, triggers, sort=sort)


def _write_binary(stream: EventStream, fh) -> None:
    w, h = stream.sensor_dims
    fh.write(BINARY_MAGIC)
    fh.write(struct.pack("<HHI", w, h, len(stream.triggers)))
    for t, edge in stream.triggers:
        fh.write(struct.pack("<QB", t, _EDGE_CODE[edge]))
    fh.write(struct.pack("<Q", len(stream)))
    rec = np.empty(len(stream), dtype=EVENT_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.columns()
    fh.write(rec.tobytes())


def _read_binary(buf: bytes, sort: bool) -> EventStream:
    try:
        w, h, n_trig = struct.unpack_from("<HHI", buf, 4)
        off = 12
        triggers = []
        for _ in range(n_trig):
            t, code = struct.unpack_from("<QB", buf, off)
            off += 9
            if code not in _CODE_EDGE:
                raise EventFormatError(f"unknown trigger edge code {code}")
            triggers.append((t, _CODE_EDGE[code]))
        (n,) = struct.unpack_from("<Q", buf, off)
        off += 8
    except struct.error as exc:
        raise EventFormatError("truncated binary event header") from exc
    need = n * EVENT_RECORD.itemsize
    if len(buf) - off != need:
        raise EventFormatError(f"binary payload holds {len(buf) - off} bytes, expected {need}")
    rec = np.frombuffer(buf, dtype=EVENT_RECORD, count=n, offset=off)
    if n and not np.all((rec["p"] == 1) | (rec["p"] == -1)):
        raise EventFormatError("record with polarity outside {1, -1}")
    return EventStream(rec["t"], rec["x"], rec["y"], rec["p"], (w, h), triggers, sort=sort)


def write_events(stream: EventStream, path, fmt: str | None = None) -> None:
    """Write ``stream`` as text (``.txt``/``.csv``) or the ``EVT1`` binary format."""
    path = Path(path)
    fmt = fmt or ("text" if path.suffix in (".txt", ".csv") else "binary")
    if fmt == "text":
        buf = io.StringIO()
        _write_text(stream, buf)
        path.write_bytes(buf.getvalue().encode("utf-8"))
    elif fmt == "binary":
        with open(path, "wb") as fh:
            _write_binary(stream, fh)
    else:
        raise ValueError(f"unknown event format {fmt!r}")


def read_events(path, sort: bool = False) -> EventStream:
    """Read an event file, detecting the format from its first bytes.

    With ``sort=False`` out-of-order timestamps raise :class:`EventFormatError`;
    with ``sort=True`` they are put into canonical order.
    """
    buf = Path(path).read_bytes()
    if buf[:4] == BINARY_MAGIC:
        return _read_binary(buf, sort)
    try:
        text = buf.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EventFormatError("neither EVT1 binary nor UTF-8 text") from exc
    return _read_text(text, sort)


# ------------------------------------------------------------ segmentation

def segment_by_triggers(stream: EventStream, lenient: bool = False) -> list[EventStream]:
    """Split a recording into one sub-stream per rising/falling trigger pair.

    Each segment holds the events with ``t_rise <= t <= t_fall``, re-based to
    ``t - t_rise``, and carries triggers ``(0, rise)`` and ``(t_fall - t_rise, fall)``.
    An unmatched trailing rise is dropped with a warning.  In strict mode two
    consecutive rises (or a fall without a rise) raise :class:`SegmentationError`;
    in lenient mode a second rise closes the open segment and stray falls are ignored.
    """
    windows: list[tuple[int, int]] = []
    open_t: int | None = None
    for t, edge in stream.triggers:
        if edge == RISE:
            if open_t is not None:
                if not lenient:
                    raise SegmentationError(f"two consecutive rising edges at {open_t} and {t}")
                windows.append((open_t, t))
            open_t = t
        else:
            if open_t is None:
                if not lenient:
                    raise SegmentationError(f"falling edge at {t} without a preceding rise")
                continue
            windows.append((open_t, t))
            open_t = None
    if open_t is not None:
        warnings.warn(f"dropping unmatched rising trigger at t={open_t}", stacklevel=2)

    segments = []
    for t0, t1 in windows:
        lo = np.searchsorted(stream.t, np.uint64(t0), side="left")
        hi = np.searchsorted(stream.t, np.uint64(t1), side="right")
        segments.append(
            EventStream(
                stream.t[lo:hi] - np.uint64(t0),
                stream.x[lo:hi],
                stream.y[lo:hi],
                stream.p[lo:hi],
                stream.sensor_dims,
                ((0, RISE), (t1 - t0, FALL)),
            )
        )
    return segments


def events_from_tensor(tensor: SpikeTensor, scale: tuple[int, int] = (1, 1)) -> EventStream:
    """Expand a spike tensor into events, one per unit count, at bin-centre times.

    ``scale`` is the (x, y) pixel size of one spatial bin; events land on the
    first pixel of their bin.  Requires ``duration_us >= 2 T`` so that integer
    bin-centre times map back to their own bin.
    """
    _, n_steps, height, width = tensor.shape
    duration = int(tensor.duration_us)
    if duration < 2 * n_steps:
        raise ValueError("duration too short for integer bin-centre timestamps")
    sx, sy = scale
    c, k, yy, xx = np.nonzero(tensor.data)
    counts = tensor.data[c, k, yy, xx].astype(np.int64)
    c, k, yy, xx = (np.repeat(a, counts) for a in (c, k, yy, xx))
    t = ((2 * k + 1) * duration) // (2 * n_steps)
    p = np.where(c == 0, 1, -1)
    return EventStream(
        t.astype(np.uint64),
        xx * sx,
        yy * sy,
        p,
        (width * sx, height * sy),
        ((0, RISE), (duration, FALL)),
        sort=True,
    )
