"""Flat binary container for named float32 tensors.

Layout, all integers little-endian:

    magic    4 bytes   b"PATB"
    version  1 byte    0x01
    count    u32       number of tensors
    per tensor:
        name_len u32, name (ASCII, name_len bytes),
        ndim u32, dims u32 x ndim,
        data float32 x prod(dims), row-major

Save/load round-trips are bitwise exact. Loading validates eagerly and
raises FormatError with the byte offset of the first problem; nothing
partial is ever returned.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, FormatError

MAGIC = b"PATB"
VERSION = 1


def save_container(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named tensors; names must be unique ASCII, data is stored as float32."""
    chunks = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(tensors))]
    for name, value in tensors.items():
        try:
            raw_name = name.encode("ascii")
        except UnicodeEncodeError as exc:
            raise ConfigError(f"tensor name {name!r} is not ASCII") from exc
        arr = np.ascontiguousarray(value, dtype=np.float32)
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.blob):
            raise FormatError(f"truncated container while reading {what}", self.offset)
        piece = self.blob[self.offset : self.offset + n]
        self.offset += n
        return piece

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_container(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container back into a name -> float32 array mapping."""
    reader = _Reader(Path(path).read_bytes())
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    version = reader.take(1, "version")[0]
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    count = reader.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        name_off = reader.offset
        name_len = reader.u32(f"name length of tensor {i}")
        raw_name = reader.take(name_len, f"name of tensor {i}")
        try:
            name = raw_name.decode("ascii")
        except UnicodeDecodeError:
            raise FormatError(f"tensor {i} name is not ASCII", name_off + 4) from None
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}", name_off)
        dims_off = reader.offset
        ndim = reader.u32(f"ndim of {name!r}")
        if ndim > 32:
            raise FormatError(f"implausible ndim {ndim} for {name!r}", dims_off)
        shape = []
        size = 1
        for d in range(ndim):
            dim = reader.u32(f"dim {d} of {name!r}")
            if dim == 0:
                raise FormatError(f"zero dim {d} of {name!r}", reader.offset - 4)
            shape.append(dim)
            size *= dim
        if reader.offset + 4 * size > len(reader.blob):
            raise FormatError(
                f"dims {shape} of {name!r} exceed remaining bytes", dims_off
            )
        data = np.frombuffer(reader.take(4 * size, f"data of {name!r}"), dtype="<f4")
        tensors[name] = data.reshape(shape).copy()
    if reader.offset != len(reader.blob):
        raise FormatError("trailing bytes after last tensor", reader.offset)
    return tensors
