"""Flat binary weight snapshots.

Layout, all integers little-endian u32::

    b"VILW" | version | count | count x (name_len | name | rank | dims... | f32 data)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"VILW"
VERSION = 1


def dumps_weights(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def loads_weights(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise ValueError("not a VILW weight file (bad magic)")
    view = memoryview(data)
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ValueError("truncated weight file")
        vals = struct.unpack_from(fmt, view, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    tensors = {}
    for _ in range(count):
        (n,) = take("<I")
        if pos + n > len(data):
            raise ValueError("truncated weight file")
        name = bytes(view[pos:pos + n]).decode("utf-8")
        pos += n
        (rank,) = take("<I")
        dims = take(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64)) * 4
        if pos + size > len(data):
            raise ValueError(f"truncated data for tensor {name!r}")
        tensors[name] = np.frombuffer(data, "<f4", size // 4, pos).reshape(dims).astype(np.float32)
        pos += size
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes after {count} tensors")
    return tensors


def save_weights(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps_weights(tensors))


def load_weights(path) -> dict[str, np.ndarray]:
    return loads_weights(Path(path).read_bytes())
