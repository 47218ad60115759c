"""Binary checkpoints.

Layout (all integers little-endian):

    b"PFCK"                         magic
    u32  version                    currently 1
    u32  n, n bytes                 config text (``key = value`` lines)
    u32  n, n bytes                 metadata JSON (stage, epoch, optimizer scalars, RNG state)
    u32  count                      number of tensor records
    count x record:
        u16 n, n bytes              name (utf-8)
        u8  dtype                   0 = float32, 1 = float64
        u8  ndim
        ndim x u32                  shape
        raw little-endian scalars
    32 bytes                        sha256 of everything above

Optimizer moments are stored as ordinary records named ``adam.m/<param>``
and ``adam.v/<param>``.  Metadata JSON is written with sorted keys, so a
save -> load -> save cycle reproduces the same bytes.
"""
from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError, ConfigError
from .tensor import AdamState

MAGIC = b"PFCK"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
ADAM_M, ADAM_V = "adam.m/", "adam.v/"


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict                       # name -> ndarray, in model order
    stage: int = 1
    epoch: int = 0
    adam: AdamState | None = None
    rng_state: dict | None = None
    checksum_ok: bool = True
    extra: dict = field(default_factory=dict)


def snapshot(model, stage, epoch=0, adam=None, rng=None) -> Checkpoint:
    params = {name: p.data.copy() for name, p in model.named_parameters()}
    state = rng.bit_generator.state if rng is not None else None
    return Checkpoint(model.config, params, stage, epoch, adam, state)


# -- encoding --------------------------------------------------------------

def _blob(data: bytes):
    return struct.pack("<I", len(data)) + data


def _record(name, arr):
    arr = np.asarray(arr)
    if arr.dtype not in DTYPE_CODES:
        raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name
    head += struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    meta = {"stage": ckpt.stage, "epoch": ckpt.epoch, "rng": ckpt.rng_state, "extra": ckpt.extra}
    records = list(ckpt.params.items())
    if ckpt.adam is not None:
        a = ckpt.adam
        meta["adam"] = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step}
        records += [(ADAM_M + k, v) for k, v in a.m.items()]
        records += [(ADAM_V + k, v) for k, v in a.v.items()]
    body = bytearray(MAGIC)
    body += struct.pack("<I", VERSION)
    body += _blob(ckpt.config.to_text().encode("utf-8"))
    body += _blob(json.dumps(meta, sort_keys=True).encode("utf-8"))
    body += struct.pack("<I", len(records))
    for name, arr in records:
        body += _record(name, arr)
    return bytes(body) + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.data)})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def blob(self, what):
        (n,) = self.unpack("<I", what)
        return self.take(n, what)


def decode(data: bytes) -> Checkpoint:
    if len(data) < 8:
        raise CheckpointError("truncated checkpoint (shorter than the header)")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}; not an pointfill checkpoint")
    r = _Reader(data)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}; this build reads version {VERSION}")
    try:
        config = ModelConfig.from_text(r.blob("config").decode("utf-8"))
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"stored config is invalid: {exc}") from None
    try:
        meta = json.loads(r.blob("metadata").decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError("stored metadata is not valid JSON") from None
    (count,) = r.unpack("<I", "record count")
    tensors = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"record {i} name length")
        name = r.take(n, f"record {i} name").decode("utf-8", errors="replace")
        code, ndim = r.unpack("<BB", f"{name} header")
        if code not in DTYPES:
            raise CheckpointError(f"tensor {name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        dtype = DTYPES[code]
        size = int(np.prod(shape)) * dtype.itemsize
        tensors[name] = np.frombuffer(r.take(size, name), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    digest = r.take(32, "checksum")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} unexpected bytes after the checksum")
    ok = hashlib.sha256(data[:-32]).digest() == digest
    if not ok:
        warnings.warn("checkpoint checksum mismatch: contents were modified or corrupted", stacklevel=3)

    params = {k: v for k, v in tensors.items() if not k.startswith((ADAM_M, ADAM_V))}
    adam = None
    if "adam" in meta:
        a = meta["adam"]
        adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"],
                         {k[len(ADAM_M):]: v for k, v in tensors.items() if k.startswith(ADAM_M)},
                         {k[len(ADAM_V):]: v for k, v in tensors.items() if k.startswith(ADAM_V)})
    return Checkpoint(config, params, meta["stage"], meta["epoch"], adam, meta["rng"], ok, meta.get("extra", {}))


def save_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())


# -- model binding ---------------------------------------------------------

def shape_mismatch(model, params):
    """First disagreement between model parameters and a stored table, or None."""
    expected = list(model.named_parameters())
    for name, p in expected:
        if name not in params:
            return f"tensor {name}: model has shape {p.shape}, checkpoint has no such tensor"
        if params[name].shape != p.shape:
            return f"tensor {name}: model has shape {p.shape}, checkpoint has {params[name].shape}"
    extra = [k for k in params if k not in dict(expected)]
    if extra:
        return f"tensor {extra[0]}: present in checkpoint, absent from model"
    return None


def restore(model, ckpt: Checkpoint):
    """Copy stored parameters into ``model``; refuse on any shape difference."""
    diff = shape_mismatch(model, ckpt.params)
    if diff:
        raise CheckpointError(f"checkpoint does not match the model config: {diff}")
    for name, p in model.named_parameters():
        p.data[...] = ckpt.params[name]
    return model


def restore_rng(state) -> np.random.Generator:
    rng = np.random.default_rng()
    if state is not None:
        rng.bit_generator.state = state
    return rng
