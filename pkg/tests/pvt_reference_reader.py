"""Standalone PVT1 reader using only the standard library.

Usage: python pvt_reference_reader.py FILE  -> prints dtype, shape and the first values.
"""

import array
import struct
import sys


def read_pvt(path):
    """Return (dtype, shape, flat list of floats) for a PVT1 file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != b"PVT1":
        raise ValueError("not a PVT1 file")
    code, rank = buf[4], buf[5]
    kind = {0: ("f", "float32"), 1: ("d", "float64")}.get(code)
    if kind is None:
        raise ValueError(f"bad dtype code {code}")
    shape = struct.unpack(f"<{rank}I", buf[6:6 + 4 * rank])
    count = 1
    for extent in shape:
        count *= extent
    values = array.array(kind[0])
    values.frombytes(buf[6 + 4 * rank:])
    if sys.byteorder == "big":
        values.byteswap()
    if len(values) != count:
        raise ValueError(f"expected {count} values, found {len(values)}")
    return kind[1], tuple(shape), values.tolist()


if __name__ == "__main__":
    dtype, shape, values = read_pvt(sys.argv[1])
    print(dtype, shape, values[:8])
