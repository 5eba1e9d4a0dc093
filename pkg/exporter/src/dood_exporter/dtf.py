"""Writer/reader for the DTF tensor container consumed by the scoring
pipeline. Implemented against the published byte layout:

    bytes 0..7    ASCII magic "DOODTNSR"
    bytes 8..11   version u32 LE (= 1)
    byte  12      dtype code u8 (0 = float32, 1 = uint8)
    byte  13      rank u8 (1..4)
    then          rank x u64 LE dimension sizes
    then          row-major payload (float32 LE / raw u8)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"DOODTNSR"
VERSION = 1
_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


def write_dtf(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 4:
        raise ValueError(f"unsupported rank {arr.ndim}")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IBB", VERSION, _CODES[arr.dtype], arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(arr.tobytes(order="C"))


def read_dtf(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: bad magic")
    version, code, rank = struct.unpack_from("<IBB", raw, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    shape = struct.unpack_from(f"<{rank}Q", raw, 14)
    dtype = _DTYPES[code]
    body = raw[14 + 8 * rank:]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(body) != expected:
        raise ValueError(f"{path}: payload size {len(body)} != declared {expected}")
    return np.frombuffer(body, dtype=dtype).reshape(shape).copy()
