"""Reader/writer for the DTNS binary tensor container.

Layout: ``b"DTNS"``, version byte ``0x01``, dtype byte ``0x01`` (float32),
little-endian ``u32`` rank, ``rank`` little-endian ``u64`` extents, then the
row-major little-endian float32 payload.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"DTNS"
VERSION = 1
DTYPE_F32 = 1


class DTNSError(ValueError):
    pass


def encode(arr) -> bytes:
    arr = np.asarray(arr)
    if not np.all(np.isfinite(arr)):
        raise DTNSError("refusing to serialize non-finite values")
    if any(e <= 0 for e in arr.shape):
        raise DTNSError(f"extents must be positive, got {arr.shape}")
    head = MAGIC + bytes([VERSION, DTYPE_F32]) + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_from(f: BinaryIO, name: str = "<stream>") -> np.ndarray:
    head = f.read(10)
    if len(head) < 10:
        raise DTNSError(f"{name}: truncated header")
    if head[:4] != MAGIC:
        raise DTNSError(f"{name}: bad magic {head[:4]!r}")
    if head[4] != VERSION or head[5] != DTYPE_F32:
        raise DTNSError(f"{name}: unsupported version/dtype {head[4]}/{head[5]}")
    (rank,) = struct.unpack("<I", head[6:10])
    raw = f.read(8 * rank)
    if len(raw) < 8 * rank:
        raise DTNSError(f"{name}: truncated extents")
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = f.read(4 * count)
    if len(payload) < 4 * count:
        raise DTNSError(f"{name}: truncated payload ({len(payload)} of {4 * count} bytes)")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def decode(buf: bytes) -> np.ndarray:
    return read_from(io.BytesIO(buf))


def save(path: str | os.PathLike, arr) -> None:
    with open(path, "wb") as f:
        f.write(encode(arr))


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        arr = read_from(f, os.fspath(path))
        if f.read(1):
            raise DTNSError(f"{os.fspath(path)}: trailing bytes after tensor")
    return arr
