"""Binary parameter checkpoints ("HTCK").

Layout (little-endian)::

    magic  b"HTCK"
    u32    version (1)
    u32    config length, then that many bytes of ModelConfig JSON
    repeated until EOF, in ``parameter_shapes`` order:
        u32 name length, name bytes (utf-8)
        u32 rank, u32 x rank dims
        f64 x prod(dims) payload
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .model import HTNet, ModelConfig, parameter_shapes
from .tensor import Tensor

MAGIC = b"HTCK"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def checkpoint_bytes(model: HTNet) -> bytes:
    cfg = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(cfg)), cfg]
    for name in parameter_shapes(model.cfg):
        arr = model.params[name].data
        encoded = name.encode()
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(chunks)


def save_checkpoint(model: HTNet, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointFormatError(
                f"truncated {what}: need {n} bytes, {len(self.raw) - self.pos} left", self.pos
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def parse_checkpoint(raw: bytes) -> HTNet:
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    n = r.u32("config length")
    start = r.pos
    try:
        cfg = ModelConfig.from_dict(json.loads(r.take(n, "config").decode()))
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"bad model config: {exc}", start) from exc
    expected = parameter_shapes(cfg)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for want_name, want_shape in expected.items():
        at = r.pos
        name = r.take(r.u32("name length"), "name").decode()
        if name != want_name:
            raise CheckpointFormatError(f"expected parameter {want_name!r}, found {name!r}", at)
        rank = r.u32("rank")
        at = r.pos
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        if tuple(dims) != want_shape:
            raise CheckpointFormatError(
                f"{name}: shape {tuple(dims)} does not match config {want_shape}", at
            )
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * count, f"{name} payload"), dtype="<f8")
        params[name] = Tensor(
            data.reshape(dims).astype(np.float64), requires_grad=True, name=name
        )
    if not r.done:
        raise CheckpointFormatError("trailing bytes after last parameter", r.pos)
    return HTNet(cfg, params)


def load_checkpoint(path: str | Path) -> HTNet:
    return parse_checkpoint(Path(path).read_bytes())
