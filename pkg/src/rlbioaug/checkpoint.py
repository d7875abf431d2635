"""Named-tensor checkpoint file ("BARL", little-endian).

Layout: magic b"BARL", version u32, count u32, then per tensor:
name length u16, UTF-8 name, rank u8, dims u32 * rank, f64 payload (row-major).
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor

MAGIC = b"BARL"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def dumps(tensors: Mapping[str, Tensor | np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        value = tensors[name]
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("not a BARL checkpoint (bad magic)", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        start = pos
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("tensor name is not valid UTF-8", start) from None
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(8 * n, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor", pos)
    return out


def save(path: str | Path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
