"""PVT1 binary tensor format.

Layout, all little-endian::

    b"PVT1"            4 bytes magic
    dtype code         1 byte (0 = float32, 1 = float64)
    rank               1 byte
    extents            rank x uint32
    payload            row-major elements
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"PVT1"
_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.asarray(array)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}; PVT1 stores float32 or float64")
    if arr.ndim > 255:
        raise FormatError("rank exceeds 255")
    header = MAGIC + struct.pack("<BB", _CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("missing PVT1 magic")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + count * dt.itemsize:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {count * dt.itemsize}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save(path: str | os.PathLike, array) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(array))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
