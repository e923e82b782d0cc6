"""Binary checkpoint container.

Layout (little-endian)::

    b"MNKY" | u16 major | u16 minor | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 dtype | u8 rank | rank x u64 dims | payload
    u32 JSON length | UTF-8 JSON (config, history, encoder seed, no-decay names)

dtype codes: 0 = float32, 1 = uint64, 2 = uint8.  Tensors are written in
name order and the JSON uses sorted keys, so equal models give equal bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .errors import FormatError
from .membank import ExemplarMemory, KeyEncoder
from .model import MunkeyModel
from .nncore import ParamStore

MAGIC = b"MNKY"
VERSION = (1, 0)
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<u8"), 2: np.dtype("u1")}
_CODES = {np.dtype("<f4"): 0, np.dtype("<u8"): 1, np.dtype("u1"): 2}


@dataclass
class Checkpoint:
    tensors: dict  # name -> ndarray (float32, uint64 or uint8)
    meta: dict = field(default_factory=dict)
    version: tuple = VERSION


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise FormatError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<HHI", *ckpt.version, len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        parts.append(_encode_tensor(name, ckpt.tensors[name]))
    blob = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<I", len(blob)) + blob)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint while reading {what} "
                              f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(buf: bytes) -> Checkpoint:
    rd = _Reader(buf)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    major, minor, count = rd.unpack("<HHI", "header")
    if major != VERSION[0]:
        raise FormatError(f"unsupported checkpoint major version {major} (reader knows {VERSION[0]})")
    tensors = {}
    for _ in range(count):
        (n,) = rd.unpack("<I", "tensor name length")
        try:
            name = rd.take(n, "tensor name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8") from None
        code, rank = rd.unpack("<BB", f"header of {name!r}")
        if code not in _DTYPES:
            raise FormatError(f"tensor {name!r}: unknown dtype code {code}")
        shape = rd.unpack(f"<{rank}Q", f"shape of {name!r}")
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(rd.take(nbytes, f"payload of {name!r}"), dtype=dt).reshape(shape)
        tensors[name] = arr.copy()
    (n,) = rd.unpack("<I", "metadata length")
    try:
        meta = json.loads(rd.take(n, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata blob: {exc}") from None
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes after checkpoint end")
    return Checkpoint(tensors, meta, (major, minor))


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = os.fspath(path)
    folder = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=folder)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write(path, to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


# --- model <-> checkpoint -----------------------------------------------------------


def model_to_checkpoint(model: MunkeyModel) -> Checkpoint:
    tensors = {name: t.data.astype(np.float32) for name, t in model.params.items()}
    mem, enc = model.memory, model.encoder
    tensors["mem.ids"] = mem.ids.astype(np.uint64)
    tensors["mem.keys"] = mem.keys
    tensors["mem.values"] = mem.values
    tensors["mem.live"] = mem.live.astype(np.uint8)
    tensors["enc.proj"] = np.asarray(enc.proj, np.float32)
    tensors["enc.mean"] = np.asarray(enc.mean, np.float32)
    tensors["enc.std"] = np.asarray(enc.std, np.float32)
    meta = {
        "config": model.config.to_dict(),
        "history": model.history,
        "encoder_seed": int(enc.seed),
        "no_decay": [n for n, t in model.params.items() if not t.decay],
    }
    return Checkpoint(tensors, meta)


def checkpoint_to_model(ckpt: Checkpoint) -> MunkeyModel:
    t, meta = ckpt.tensors, ckpt.meta
    needed = ("mem.ids", "mem.keys", "mem.values", "mem.live", "enc.proj", "enc.mean", "enc.std")
    missing = [n for n in needed if n not in t] + [k for k in ("config", "encoder_seed") if k not in meta]
    if missing:
        raise FormatError(f"checkpoint lacks {', '.join(missing)}")
    config = TrainConfig.from_dict(meta["config"])
    no_decay = set(meta.get("no_decay", []))
    params = ParamStore()
    for name in sorted(t):
        if name.startswith("model."):
            params.add(name, t[name].copy(), decay=name not in no_decay)
    memory = ExemplarMemory(t["mem.ids"].astype(np.int64), t["mem.keys"], t["mem.values"],
                            t["mem.live"].astype(bool))
    proj = t["enc.proj"].copy()
    proj.setflags(write=False)
    encoder = KeyEncoder(proj, t["enc.mean"].copy(), t["enc.std"].copy(), int(meta["encoder_seed"]))
    return MunkeyModel(params, memory, encoder, config, list(meta.get("history", [])))


def save_model(path, model: MunkeyModel) -> None:
    save_checkpoint(path, model_to_checkpoint(model))


def load_model(path) -> MunkeyModel:
    return checkpoint_to_model(load_checkpoint(path))
