"""Raw tensor file format used across the repo.

Layout: magic bytes ``HCK1``, u32 rank, u32 dims[rank], then the payload as
little-endian f32 in row-major order. Arrays are returned as float64 (exact
upcasts of the stored f32 values); writing quantizes to f32 once.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HCK1"


class TensorFormatError(ValueError):
    pass


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    header = MAGIC + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f4", copy=False).tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    if rank > 8:
        raise TensorFormatError(f"{path}: implausible rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = blob[offset:]
    if len(payload) != 4 * count:
        raise TensorFormatError(
            f"{path}: payload holds {len(payload) // 4} f32 values, dims {dims} need {count}"
        )
    data = np.frombuffer(payload, dtype="<f4", count=count)
    return data.astype(np.float64).reshape(dims)


def quantize_f32(array: np.ndarray) -> np.ndarray:
    """Round-trip through f32 so later writes are bitwise lossless."""
    return np.asarray(array, dtype=np.float32).astype(np.float64)
