"""AEW1 weight container.

Layout, all integers unsigned 64-bit little-endian::

    b"AEW1" | count
    per entry: name_len | utf-8 name | rank | extents[rank] | float64le data
"""
from __future__ import annotations

import io
import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"AEW1"
_U64 = struct.Struct("<Q")


class WeightFormatError(ValueError):
    pass


def dumps(state) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U64.pack(len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        buf.write(_U64.pack(len(raw)))
        buf.write(raw)
        buf.write(_U64.pack(arr.ndim))
        for n in arr.shape:
            buf.write(_U64.pack(n))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads(blob: bytes):
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise WeightFormatError("not an AEW1 file (bad magic)")
    pos = 4

    def u64():
        nonlocal pos
        if pos + 8 > len(view):
            raise WeightFormatError("truncated AEW1 file")
        (v,) = _U64.unpack_from(view, pos)
        pos += 8
        return v

    count = u64()
    state = OrderedDict()
    for _ in range(count):
        n = u64()
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        rank = u64()
        shape = tuple(u64() for _ in range(rank))
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(view):
            raise WeightFormatError(f"truncated data for {name!r}")
        state[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes")
    return state


def save(module_or_state, path) -> None:
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    with open(path, "wb") as fh:
        fh.write(dumps(state))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
