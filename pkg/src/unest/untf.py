"""UNTF binary tensor files.

Layout: ``b"UNTF"``, u8 version, u8 rank, little-endian u32 dims, then a
row-major payload.  Version 1 stores float32; version 2 stores float64 and
is used for checkpoints so that resumed training is bit-exact.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"UNTF"
_PAYLOAD = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class UNTFError(ValueError):
    pass


def encode(array, version: int = 1) -> bytes:
    a = np.asarray(array, dtype=np.float64)
    if version not in _PAYLOAD:
        raise UNTFError(f"unsupported UNTF version {version}")
    if a.ndim > 255:
        raise UNTFError("rank exceeds 255")
    head = MAGIC + struct.pack("<BB", version, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=_PAYLOAD[version]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise UNTFError("bad UNTF magic")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version not in _PAYLOAD:
        raise UNTFError(f"unsupported UNTF version {version}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise UNTFError("truncated UNTF header")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    dt = _PAYLOAD[version]
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + count * dt.itemsize:
        raise UNTFError(f"UNTF payload size {len(buf) - off} does not match dims {dims}")
    return np.frombuffer(buf, dtype=dt, offset=off, count=count).astype(np.float64).reshape(dims)


def save(path, array, version: int = 1) -> None:
    data = encode(array, version)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
