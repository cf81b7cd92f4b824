"""Binary tensor payloads.

A payload is a u64 entry count followed by entries of::

    u64 name length | UTF-8 name | u64 rank | rank x u64 dims | float64 values

All integers and floats are little-endian; values are row-major.
"""
import struct

import numpy as np

from ..errors import FormatError

_U64 = struct.Struct("<Q")


def write_str(buf, s):
    raw = s.encode("utf-8")
    buf += _U64.pack(len(raw))
    buf += raw


def read_u64(view, pos):
    if pos + 8 > len(view):
        raise FormatError("truncated payload")
    return _U64.unpack_from(view, pos)[0], pos + 8


def read_str(view, pos):
    n, pos = read_u64(view, pos)
    if pos + n > len(view):
        raise FormatError("truncated payload")
    try:
        return bytes(view[pos:pos + n]).decode("utf-8"), pos + n
    except UnicodeDecodeError as exc:
        raise FormatError(f"bad UTF-8 name: {exc}") from None


def encode_tensors(named):
    """Serialize a name -> array mapping (insertion order kept)."""
    buf = bytearray(_U64.pack(len(named)))
    for name, arr in named.items():
        arr = np.asarray(arr, dtype="<f8")
        write_str(buf, name)
        buf += _U64.pack(arr.ndim)
        for n in arr.shape:
            buf += _U64.pack(n)
        buf += np.ascontiguousarray(arr).tobytes()
    return bytes(buf)


def decode_tensors(view, pos=0):
    """Inverse of :func:`encode_tensors`; returns (dict, new position)."""
    view = memoryview(view)
    count, pos = read_u64(view, pos)
    out = {}
    for _ in range(count):
        name, pos = read_str(view, pos)
        rank, pos = read_u64(view, pos)
        if rank > 8:
            raise FormatError(f"implausible rank {rank} for {name!r}")
        dims = []
        for _ in range(rank):
            n, pos = read_u64(view, pos)
            dims.append(n)
        nbytes = 8 * int(np.prod(dims, dtype=np.int64))
        if pos + nbytes > len(view):
            raise FormatError(f"truncated values for {name!r}")
        out[name] = np.frombuffer(view[pos:pos + nbytes], dtype="<f8").astype(np.float64).reshape(dims)
        pos += nbytes
    return out, pos
