"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"KPRN" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 dtype (0 f32, 1 f64) | u8 rank
                | u32 dims[rank] | raw row-major payload
    u32 word count K | K u32 words

The trailing words hold ``epoch, step, seed_lo, seed_hi, config_len`` and then
the UTF-8 JSON config snapshot packed into zero-padded u32 words.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"KPRN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    params: dict
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)
    version: int = VERSION

    def tensors(self) -> dict:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"adamw.m/{k}": v for k, v in self.adam_m.items()})
        out.update({f"adamw.v/{k}": v for k, v in self.adam_v.items()})
        return out


def _words(ckpt: Checkpoint) -> list:
    blob = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    padded = blob + b"\0" * (-len(blob) % 4)
    packed = list(struct.unpack(f"<{len(padded) // 4}I", padded)) if padded else []
    seed = int(ckpt.seed) & 0xFFFFFFFFFFFFFFFF
    return [ckpt.epoch, ckpt.step, seed & 0xFFFFFFFF, seed >> 32, len(blob)] + packed


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = ckpt.tensors()
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    words = _words(ckpt)
    parts.append(struct.pack(f"<I{len(words)}I", len(words), *words))
    return b"".join(parts)


def checkpoint_save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointCorruptError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise NotACheckpointError("not a checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(4)
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    ckpt = Checkpoint(params={})
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, rank = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointCorruptError(f"tensor {name!r}: unknown dtype code {code}")
        dims = r.unpack(f"<{rank}I")
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        kind, _, key = name.partition("/")
        target = {"param": ckpt.params, "adamw.m": ckpt.adam_m, "adamw.v": ckpt.adam_v}.get(kind)
        if target is None:
            raise CheckpointCorruptError(f"unexpected tensor name {name!r}")
        target[key] = arr
    (k,) = r.unpack("<I")
    words = r.unpack(f"<{k}I")
    if k < 5:
        raise CheckpointCorruptError("checkpoint trailer too short")
    ckpt.epoch, ckpt.step = words[0], words[1]
    ckpt.seed = words[2] | (words[3] << 32)
    blob = struct.pack(f"<{k - 5}I", *words[5:])[: words[4]]
    try:
        ckpt.config = json.loads(blob.decode("utf-8")) if blob else {}
    except ValueError as exc:
        raise CheckpointCorruptError(f"bad config snapshot: {exc}") from exc
    if r.pos != len(buf):
        raise CheckpointCorruptError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return ckpt


def checkpoint_load(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head != MAGIC:
            raise NotACheckpointError(f"{path} is not a checkpoint (bad magic {head!r})")
        rest = fh.read()
    return checkpoint_from_bytes(head + rest)
