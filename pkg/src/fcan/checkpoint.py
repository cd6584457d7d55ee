"""Flat binary tensor container.

Layout: the 5-byte magic ``FCAN1``, then one record per tensor until EOF:

    u64 name_len | name (utf-8) | u64 rank | rank x u64 dims | prod(dims) x f64

All integers and floats are little-endian.
"""

import io
import struct

import numpy as np

MAGIC = b"FCAN1"


def dumps(tensors):
    """Serialise an ordered mapping name -> array."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data):
    if data[:5] != MAGIC:
        raise ValueError("not an FCAN1 container (bad magic)")
    out = {}
    pos = 5
    end = len(data)

    def read(n):
        nonlocal pos
        if pos + n > end:
            raise ValueError(f"truncated container at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    while pos < end:
        (nlen,) = struct.unpack("<Q", read(8))
        name = read(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", read(8))
        dims = struct.unpack(f"<{rank}Q", read(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(read(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        out[name] = arr
    return out


def save(path, tensors):
    with open(path, "wb") as f:
        f.write(dumps(tensors))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
