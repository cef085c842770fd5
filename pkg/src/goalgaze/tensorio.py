"""Flat binary tensor files.

Layout (all integers little-endian)::

    b"GGTN" | version u32 | rank u32 | extent u32 * rank | data f32 * prod(extents)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"GGTN"
VERSION = 1


def to_bytes(value) -> bytes:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    arr = np.asarray(arr, dtype="<f4")  # tobytes() below is C order regardless
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 12:
        raise FormatError("tensor file shorter than its header", offset=len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}", offset=0)
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor format version {version}", offset=4)
    head = 12 + 4 * rank
    if len(buf) < head:
        raise FormatError("truncated extents", offset=len(buf))
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != head + 4 * count:
        raise FormatError(
            f"expected {count} f32 values for shape {shape}, found {len(buf) - head} bytes",
            offset=head,
        )
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=head).reshape(shape)
    return Tensor(data.astype(np.float32))


def save_tensor(path, value) -> None:
    Path(path).write_bytes(to_bytes(value))


def load_tensor(path) -> Tensor:
    return from_bytes(Path(path).read_bytes())
