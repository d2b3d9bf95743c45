"""Flat binary parameter files.

Layout (all integers little-endian)::

    magic      8 bytes  b"ELDNCKPT"
    version    u32
    count      u32
    repeated count times:
        name_len  u32
        name      utf-8 bytes
        rank      u32
        dims      u64 * rank
        data      f64 * prod(dims)
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"ELDNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        # ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.array(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        size = int(np.prod(dims, dtype=np.int64))  # 1 for a scalar
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(tuple(dims)).astype(np.float64)
        pos += 8 * size
        out[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out
