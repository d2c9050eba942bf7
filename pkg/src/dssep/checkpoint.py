"""Binary weight container.

Layout (little-endian)::

    b"DSSF"  u32 version  u32 n  <n bytes of UTF-8 JSON>
    repeated until EOF:
        u32 name_len  name  u8 dtype_tag  u32 rank  u64 dims[rank]  raw data

The JSON blob carries the model config, the training step and any other
metadata.  Optimizer moments, when present, are stored as ordinary records
under the ``opt.m.`` / ``opt.v.`` prefixes.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DSSF"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i4"), 3: np.dtype("<i8")}
TAG_OF = {dt: tag for tag, dt in DTYPE_TAGS.items()}
OPT_PREFIXES = ("opt.m.", "opt.v.")


class CheckpointError(ValueError):
    """Unreadable or malformed checkpoint file."""


@dataclass
class Checkpoint:
    weights: dict
    config: dict = field(default_factory=dict)
    step: int = 0
    optimizer: dict = None  # {"m": {...}, "v": {...}} or None


def _tensors(ckpt: Checkpoint):
    items = list(ckpt.weights.items())
    if ckpt.optimizer:
        for key, prefix in (("m", "opt.m."), ("v", "opt.v.")):
            items += [(prefix + name, arr) for name, arr in ckpt.optimizer[key].items()]
    return items


def encode(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.config)
    meta["step"] = int(ckpt.step)
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name, arr in _tensors(ckpt):
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in TAG_OF:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<BI", TAG_OF[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode(buf: bytes, source="<bytes>") -> Checkpoint:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated at byte {pos}")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{source}: not a DSSF checkpoint (bad magic)")
    version, blob_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(bytes(take(blob_len)).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt config blob ({exc})") from None
    tensors = {}
    while pos < len(view):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode()
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in DTYPE_TAGS:
            raise CheckpointError(f"{source}: tensor {name!r} has unknown dtype tag {tag}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dt = DTYPE_TAGS[tag]
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(count * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = data.astype(dt.newbyteorder("="))
    step = int(meta.pop("step", 0))
    weights = {k: v for k, v in tensors.items() if not k.startswith(OPT_PREFIXES)}
    opt = None
    if any(k.startswith(OPT_PREFIXES) for k in tensors):
        opt = {
            "m": {k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")},
            "v": {k[len("opt.v."):]: v for k, v in tensors.items() if k.startswith("opt.v.")},
        }
    return Checkpoint(weights, meta, step, opt)


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, ckpt: Checkpoint):
    atomic_write_bytes(path, encode(ckpt))


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from None
    return decode(buf, str(path))


def save_model(path, cfg, weights, step=0, optimizer=None, extra=None):
    """Write a model checkpoint whose JSON blob holds ``{"model": cfg, ...extra}``."""
    meta = {"model": cfg.to_dict()}
    meta.update(extra or {})
    save(path, Checkpoint({k: np.asarray(v) for k, v in weights.items()}, meta, step, optimizer))


def load_model(path):
    """(ModelConfig, weights, Checkpoint) from a model checkpoint; shapes are validated."""
    from .model import ModelConfig, check_weights

    ckpt = load(path)
    if "model" not in ckpt.config:
        raise CheckpointError(f"{path}: checkpoint has no model config")
    try:
        cfg = ModelConfig.from_dict(ckpt.config["model"])
        check_weights(cfg, ckpt.weights)
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return cfg, ckpt.weights, ckpt
