"""Binary weight container.

Layout, all integers little-endian ``uint32``::

    b"RAVW" | version | entry count
    per entry: name length | UTF-8 name | rank | extents... | float32 LE payload
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RAVW"
VERSION = 1


class WeightFormatError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightFormatError(f"truncated file: need {n} bytes for {what} at offset {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise WeightFormatError("bad magic: not a RAVW weight file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise WeightFormatError(f"unsupported weight format version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        if name in out:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * size, f"payload of {name!r}"), dtype="<f4")
        out[name] = data.astype(np.float32).reshape(shape)
    if pos != len(view):
        raise WeightFormatError(f"{len(view) - pos} trailing bytes after last entry")
    return out


def write(path, tensors: dict[str, np.ndarray]) -> int:
    data = dumps(tensors)
    Path(path).write_bytes(data)
    return len(data)


def read(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
