"""Single-file checkpoint container.

Layout (all integers little-endian)::

    magic   8 bytes  b"VLKITCKP"
    version 1 byte
    count   u32
    entries: name_len u32 | name utf-8 | dtype u8 | ndim u32 | dims u64 * ndim | payload

Payload is the raw little-endian array data, row-major. Round trips are
bit-exact.
"""

import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"VLKITCKP"
VERSION = 1

_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}


class CheckpointError(ValueError):
    pass


def _code(arr):
    dt = arr.dtype
    if dt == np.float32:
        return 0
    if dt == np.float64:
        return 1
    if dt == np.uint8:
        return 3
    if np.issubdtype(dt, np.integer) or dt == np.bool_:
        return 2
    raise CheckpointError(f"unsupported dtype {dt}")


def save(path, entries):
    """Write ``{name: array or Tensor}`` to ``path``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(entries)))
        for name, value in entries.items():
            arr = value.data if isinstance(value, Tensor) else np.asarray(value)
            code = _code(arr)
            arr = np.asarray(arr, dtype=_CODES[code], order="C")  # ascontiguousarray would promote 0-d to 1-d
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def load(path):
    """Read a container back into ``{name: ndarray}`` (insertion order kept)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = buf[8]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<I", buf, 9)
    pos = 13
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        code, ndim = struct.unpack_from("<BI", buf, pos)
        pos += 5
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        dt = _CODES.get(code)
        if dt is None:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
