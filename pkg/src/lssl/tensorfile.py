"""Minimal binary tensor container used for all image files.

Layout: 8-byte magic ``LSSLTEN1``, one u8 rank, rank u32 little-endian
dimensions, then the payload as row-major IEEE-754 float32. The format is
self-describing and round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"LSSLTEN1"
MAX_RANK = 8


def write_tensor(path: str | Path, data: np.ndarray) -> None:
    """Write ``data`` to ``path``, converting to float32."""
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise FormatError(f"rank {arr.ndim} outside supported range 1..{MAX_RANK}")
    header = MAGIC + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor file, validating magic, header, and payload length."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 1:
        raise FormatError(f"{path}: file too short for a header")
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    ndim = blob[len(MAGIC)]
    if ndim < 1 or ndim > MAX_RANK:
        raise FormatError(f"{path}: unsupported rank {ndim}")
    dim_end = len(MAGIC) + 1 + 4 * ndim
    if len(blob) < dim_end:
        raise FormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f"<{ndim}I", blob[len(MAGIC) + 1 : dim_end])
    if any(d == 0 for d in dims):
        raise FormatError(f"{path}: zero-sized dimension in {dims}")
    count = int(np.prod(dims, dtype=np.int64))
    payload = blob[dim_end:]
    if len(payload) != 4 * count:
        raise FormatError(
            f"{path}: payload holds {len(payload)} bytes, header implies {4 * count}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
