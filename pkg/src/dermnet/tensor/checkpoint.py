"""SKCN binary parameter checkpoints.

Layout (all integers little-endian)::

    b"SKCN" | u32 version=1 | u32 tensor_count
    per tensor: u16 name_len | name utf-8 | u8 group | u8 ndim | u32 dims... | u8 dtype(0=f32) | f32 data
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Union

import numpy as np

from .params import GROUPS, Parameter

MAGIC = b"SKCN"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


@dataclass
class CheckpointTensor:
    name: str
    group: str
    data: np.ndarray


PathOrFile = Union[str, os.PathLike, BinaryIO]


def encode_checkpoint(tensors: Iterable[Union[Parameter, CheckpointTensor]]) -> bytes:
    items = list(tensors)
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(items)))
    for item in items:
        data = np.asarray(item.data, dtype="<f4", order="C")
        name = item.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {item.name[:40]}...")
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(struct.pack("<BB", GROUPS.index(item.group), data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(struct.pack("<B", DTYPE_F32))
        buf.write(data.tobytes())
    return buf.getvalue()


def decode_checkpoint(raw: bytes) -> list[CheckpointTensor]:
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic: not an SKCN checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported SKCN version {version}")
    out = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        group_code, ndim = struct.unpack("<BB", take(2))
        if group_code >= len(GROUPS):
            raise CheckpointError(f"{name}: unknown group code {group_code}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (dtype,) = struct.unpack("<B", take(1))
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{name}: unsupported dtype code {dtype}")
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
        out.append(CheckpointTensor(name, GROUPS[group_code], data))
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save_checkpoint(dest: PathOrFile, tensors: Iterable[Union[Parameter, CheckpointTensor]]) -> None:
    raw = encode_checkpoint(tensors)
    if hasattr(dest, "write"):
        dest.write(raw)
    else:
        with open(dest, "wb") as fh:
            fh.write(raw)


def load_checkpoint(src: PathOrFile) -> list[CheckpointTensor]:
    if hasattr(src, "read"):
        return decode_checkpoint(src.read())
    with open(src, "rb") as fh:
        return decode_checkpoint(fh.read())
