"""Flat binary tensor archive used for optimizer/model checkpoints.

Layout (all integers little endian):
    magic   4 bytes  b"MLTA"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16, name utf-8 bytes
        ndim     u8,  dims u32[ndim]
        payload  float32[prod(dims)] little endian
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MLTA"
VERSION = 1


class TensorArchiveError(ValueError):
    pass


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise TensorArchiveError(f"bad magic in {path}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise TensorArchiveError(f"unsupported archive version {version}")
    out: dict[str, np.ndarray] = {}
    off = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
        off += 4 * n
        out[name] = arr.astype(np.float32)
    return out
