"""Reader/writer for the big-endian IDX format used by MNIST-family datasets."""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_TYPE_CODES = {dt.newbyteorder("="): code for code, dt in IDX_TYPES.items()}


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledImageSet:
    images: np.ndarray  # [N, H, W] in [0, 1]
    labels: np.ndarray  # [N]
    source_name: str = ""

    def __post_init__(self):
        if self.images.ndim != 3:
            raise ValueError("images must be [N, H, W]")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("image intensities must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def subset(self, index) -> "LabeledImageSet":
        return LabeledImageSet(self.images[index], self.labels[index], self.source_name)


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX byte string.

    Unsigned-byte tensors of rank 2 or 3 are treated as images and scaled to
    [0, 1] by division by 255; rank-1 unsigned-byte tensors (label files) and
    all other element types are returned as stored.
    """
    if len(data) < 4:
        raise IdxFormatError("truncated IDX header")
    if data[0] != 0 or data[1] != 0:
        raise IdxFormatError("IDX magic must start with two zero bytes")
    type_code, ndim = data[2], data[3]
    if type_code not in IDX_TYPES:
        raise IdxFormatError(f"unknown IDX type code 0x{type_code:02x}")
    if not 1 <= ndim <= 3:
        raise IdxFormatError(f"IDX dimension count {ndim} outside 1-3")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError("truncated IDX dimension list")
    dims = tuple(int(d) for d in np.frombuffer(data, dtype=">u4", count=ndim, offset=4))
    dtype = IDX_TYPES[type_code]
    n = int(np.prod(dims, dtype=np.int64))
    if len(data) - header < n * dtype.itemsize:
        raise IdxFormatError(
            f"IDX payload truncated: {len(data) - header} bytes for {n} x {dtype.itemsize}-byte items"
        )
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=header).reshape(dims)
    if type_code == 0x08 and ndim >= 2:
        return arr.astype(np.float64) / 255.0
    return arr.astype(dtype.newbyteorder("="))


def encode_idx(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if not 1 <= arr.ndim <= 3:
        raise IdxFormatError("IDX supports 1-3 dimensions")
    native = arr.dtype.newbyteorder("=")
    if native not in _TYPE_CODES:
        raise IdxFormatError(f"dtype {arr.dtype} has no IDX type code")
    code = _TYPE_CODES[native]
    head = bytes([0, 0, code, arr.ndim]) + np.asarray(arr.shape, dtype=">u4").tobytes()
    return head + arr.astype(IDX_TYPES[code]).tobytes()


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path) -> np.ndarray:
    return parse_idx(_read_bytes(path))


def write_idx(array: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_idx(array))


def load_labeled_images(images_path, labels_path=None) -> LabeledImageSet:
    """Load an IDX image file (and optional label file) into a :class:`LabeledImageSet`.

    Images stored as floats are taken to already be in [0, 1].  Without a
    label file every label is 0.
    """
    images = read_idx(images_path)
    if images.ndim != 3:
        raise IdxFormatError(f"image file must be rank 3, got rank {images.ndim}")
    images = images.astype(np.float64)
    if labels_path is None:
        labels = np.zeros(len(images), dtype=np.int64)
    else:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise IdxFormatError("label file must be rank 1")
        labels = labels.astype(np.int64)
    return LabeledImageSet(images, labels, Path(images_path).name)
