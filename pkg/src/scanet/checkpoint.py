"""Binary checkpoint format.

Layout (little-endian)::

    b"SCKP"  u32 version (=1)  u32 tensor_count
    per tensor: u16 name_len, name (utf-8), u8 rank, rank * u32 dims,
                u8 dtype (0 = f32), payload
    u32 meta_len, meta (utf-8 JSON: config echo, epoch, optimizer step)

Optimizer moments travel as ordinary tensors named ``optim.m.<param>`` and
``optim.v.<param>``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SCKP"
VERSION = 1
DTYPE_F32 = 0
OPTIM_M, OPTIM_V = "optim.m.", "optim.v."


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    config: dict = field(default_factory=dict)
    epoch: int = 0
    optimizer: dict | None = None  # {"t": int, "m": {...}, "v": {...}}
    extra: dict = field(default_factory=dict)
    version: int = VERSION


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = OrderedDict(ckpt.tensors)
    meta = {"config": ckpt.config, "epoch": ckpt.epoch, "extra": ckpt.extra}
    if ckpt.optimizer is not None:
        meta["optim_step"] = ckpt.optimizer["t"]
        for k, v in ckpt.optimizer["m"].items():
            tensors[OPTIM_M + k] = v
        for k, v in ckpt.optimizer["v"].items():
            tensors[OPTIM_V + k] = v
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(struct.pack("<B", DTYPE_F32))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)))
    parts.append(blob)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt tensor name") from exc
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        (dtype,) = r.unpack("<B")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{path}: unknown dtype code {dtype} for {name}")
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        tensors[name] = arr
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata") from exc
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after metadata")

    optimizer = None
    if "optim_step" in meta:
        optimizer = {"t": meta["optim_step"], "m": {}, "v": {}}
    plain: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for k, v in tensors.items():
        if optimizer is not None and k.startswith(OPTIM_M):
            optimizer["m"][k[len(OPTIM_M) :]] = v
        elif optimizer is not None and k.startswith(OPTIM_V):
            optimizer["v"][k[len(OPTIM_V) :]] = v
        else:
            plain[k] = v
    return Checkpoint(plain, meta.get("config", {}), meta.get("epoch", 0), optimizer, meta.get("extra", {}), version)
