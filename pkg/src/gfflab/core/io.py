"""GFFT tensor dump format.

Layout: magic ``b"GFFT"``, u32 version (1), u8 dtype (0 = f32, 1 = f64),
u32 ndim, ndim x u32 extents, then the row-major little-endian payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GFFT"
VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """Raised when a GFFT stream is malformed or truncated."""


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        raise TypeError(f"GFFT stores f32/f64 only, got {arr.dtype}")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<IBI", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode(buf: bytes) -> np.ndarray:
    if len(buf) < 13 or buf[:4] != MAGIC:
        raise FormatError("bad GFFT magic")
    version, code, ndim = struct.unpack_from("<IBI", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported GFFT version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown GFFT dtype code {code}")
    off = 13
    if len(buf) < off + 4 * ndim:
        raise FormatError("truncated GFFT header")
    shape = struct.unpack_from(f"<{ndim}I", buf, off)
    off += 4 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - off != nbytes:
        raise FormatError(f"GFFT payload is {len(buf) - off} bytes, expected {nbytes}")
    return np.frombuffer(buf, dtype=dtype, offset=off).reshape(shape).astype(dtype.newbyteorder("="))


def save(path, arr: np.ndarray):
    Path(path).write_bytes(encode(arr))


def load(path) -> np.ndarray:
    return decode(Path(path).read_bytes())
