"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic    8 bytes  b"CAPEGTD\\0"
    version  u32
    config   u32 length + UTF-8 JSON (sorted keys)
    epoch    u32
    rng      u32 length + UTF-8 JSON (numpy bit generator state)
    count    u32
    tensors  count x [u16 name length, name, u8 ndim, ndim x u32 extents, float64 LE values]
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .nn import ParamSet

MAGIC = b"CAPEGTD\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    params: ParamSet
    epoch: int = 0
    rng_state: dict = field(default_factory=dict)
    extra: ParamSet = field(default_factory=ParamSet)  # optimizer moments, prefixed names


def _put_str(buf: io.BytesIO, text: str) -> None:
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _put_str(buf, ckpt.config.to_json())
    buf.write(struct.pack("<I", ckpt.epoch))
    _put_str(buf, json.dumps(ckpt.rng_state, sort_keys=True))
    tensors = [(n, ckpt.params[n]) for n in ckpt.params] + [(n, ckpt.extra[n]) for n in ckpt.extra]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    config = RunConfig.from_dict(json.loads(r.string()))
    (epoch,) = r.unpack("<I")
    rng_state = json.loads(r.string())
    (count,) = r.unpack("<I")
    params, extra = ParamSet(), ParamSet()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        (extra if name.startswith("optim.") else params)[name] = arr
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after tensor table")
    return Checkpoint(config, params, epoch, rng_state, extra)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode(ckpt))


def load(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
