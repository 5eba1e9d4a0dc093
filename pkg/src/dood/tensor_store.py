"""Bit-exact binary container for dense tensors (DTF files).

All tensors exchanged between pipeline stages -- feature maps, masks,
score maps, checkpoint parameters -- travel through this one format so
that no image codec or third-party serializer is needed.

DTF layout (all integers little-endian):

    bytes 0..7    ASCII magic "DOODTNSR"
    bytes 8..11   version, u32 (= 1)
    byte  12      dtype code, u8 (0 = float32, 1 = uint8)
    byte  13      rank, u8 (1..4)
    then          rank x u64 dimension sizes
    then          row-major payload (float32 LE or raw u8)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DOODTNSR"
VERSION = 1
MAX_RANK = 4

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class TensorFormatError(ValueError):
    """Raised for malformed DTF files or unsupported tensors."""


def _check_dense(t: np.ndarray) -> np.ndarray:
    if t.ndim < 1 or t.ndim > MAX_RANK:
        raise TensorFormatError(f"rank {t.ndim} outside supported range 1..{MAX_RANK}")
    if any(d < 1 for d in t.shape):
        raise TensorFormatError(f"empty dimension in shape {t.shape}")
    dt = t.dtype.newbyteorder("<") if t.dtype.byteorder == ">" else t.dtype
    if np.dtype(dt) not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {t.dtype} (float32 or uint8 only)")
    return np.ascontiguousarray(t, dtype=np.dtype(dt))


def write_tensor(path: str | Path, t: np.ndarray) -> None:
    """Write a float32/uint8 tensor to `path` in DTF format.

    Byte-for-byte deterministic for identical inputs.
    """
    t = _check_dense(t)
    code = _DTYPE_CODES[np.dtype(t.dtype.newbyteorder("<"))]
    header = MAGIC + struct.pack("<IBB", VERSION, code, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = t.astype(t.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    with open(path, "wb") as f:
        f.write(header)
        f.write(dims)
        f.write(payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a DTF file back into a numpy array (bitwise round-trip of write_tensor)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 14 or raw[:8] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic")
    version, code, rank = struct.unpack_from("<IBB", raw, 8)
    if version != VERSION:
        raise TensorFormatError(f"{path}: unsupported version {version}")
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    if rank < 1 or rank > MAX_RANK:
        raise TensorFormatError(f"{path}: rank {rank} outside supported range 1..{MAX_RANK}")
    if len(raw) < 14 + 8 * rank:
        raise TensorFormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}Q", raw, 14)
    if any(d < 1 for d in shape):
        raise TensorFormatError(f"{path}: empty dimension in shape {shape}")
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape))
    expected = count * dtype.itemsize
    body = raw[14 + 8 * rank:]
    if len(body) != expected:
        kind = "truncated" if len(body) < expected else "oversized"
        raise TensorFormatError(
            f"{path}: {kind} payload ({len(body)} bytes, declared {expected})"
        )
    arr = np.frombuffer(body, dtype=dtype).reshape(shape)
    return np.array(arr)  # own, writable copy


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W grid of C-dimensional feature vectors from one image."""

    values: np.ndarray  # float32 [H, W, C]

    def __post_init__(self) -> None:
        v = self.values
        if v.ndim != 3:
            raise ValueError(f"feature map must be rank 3 [H, W, C], got shape {v.shape}")
        if v.dtype != np.float32:
            object.__setattr__(self, "values", v.astype(np.float32))
        if not np.isfinite(self.values).all():
            raise ValueError("feature map contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def vectors(self) -> np.ndarray:
        """Flatten to [H*W, C] (row-major patch order)."""
        return self.values.reshape(-1, self.values.shape[2])


MASK_INLIER = 0
MASK_OOD = 1
MASK_IGNORE = 255


@dataclass(frozen=True)
class OoDMask:
    """Pixel labels: 0 = inlier, 1 = out-of-distribution, 255 = ignore."""

    labels: np.ndarray  # uint8 [H, W]

    def __post_init__(self) -> None:
        m = self.labels
        if m.ndim != 2:
            raise ValueError(f"mask must be rank 2 [H, W], got shape {m.shape}")
        if m.dtype != np.uint8:
            raise ValueError(f"mask must be uint8, got {m.dtype}")
        bad = ~np.isin(m, (MASK_INLIER, MASK_OOD, MASK_IGNORE))
        if bad.any():
            raise ValueError(f"mask contains invalid label values {np.unique(m[bad])}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def load_feature_map(path: str | Path) -> FeatureMap:
    arr = read_tensor(path)
    if arr.dtype != np.float32:
        raise TensorFormatError(f"{path}: feature map must be float32, got {arr.dtype}")
    return FeatureMap(arr)


def load_mask(path: str | Path) -> OoDMask:
    arr = read_tensor(path)
    if arr.dtype != np.uint8:
        raise TensorFormatError(f"{path}: mask must be uint8, got {arr.dtype}")
    return OoDMask(arr)
