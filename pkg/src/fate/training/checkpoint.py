"""Portable checkpoint files.

Layout (all integers little-endian)::

    b"FATECKPT"  u16 format version  u32 JSON length  JSON document
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 ndim, u32 extent per axis,
                float32 values in row-major order

The JSON document carries the model config, training configs, the feature
registry, phase provenance and the seed.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..model import build_model, config_from_dict
from ..registry import FeatureRegistry

MAGIC = b"FATECKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: torch.nn.Module
    registry: FeatureRegistry
    meta: dict = field(default_factory=dict)

    @property
    def model_config(self):
        return self.model.cfg


def save_checkpoint(path: str | Path, model: torch.nn.Module, registry: FeatureRegistry,
                    meta: dict | None = None) -> Path:
    doc = {
        "model": model.cfg.model_dump(),
        "registry": registry.to_dict(),
        **(meta or {}),
    }
    blob = json.dumps(doc, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode()
        arr = tensor.detach().cpu().numpy().astype("<f4")
        buf.write(struct.pack("<HB", len(raw), arr.ndim))
        buf.write(raw)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())
    return path


def _read(stream: io.BytesIO, fmt: str):
    size = struct.calcsize(fmt)
    chunk = stream.read(size)
    if len(chunk) != size:
        raise CheckpointError("checkpoint file is truncated")
    return struct.unpack(fmt, chunk)


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    stream = io.BytesIO(data)
    if stream.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path} is not a FATE checkpoint")
    version, n_json = _read(stream, "<HI")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    try:
        doc = json.loads(stream.read(n_json))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint metadata is corrupt: {exc}") from exc
    cfg = config_from_dict(doc["model"])
    model = build_model(cfg)
    expected = model.state_dict()
    (count,) = _read(stream, "<I")
    state = {}
    for _ in range(count):
        n_name, ndim = _read(stream, "<HB")
        name = stream.read(n_name).decode()
        shape = _read(stream, f"<{ndim}I") if ndim else ()
        n_bytes = 4 * int(np.prod(shape, dtype=np.int64))
        raw = stream.read(n_bytes)
        if len(raw) != n_bytes:
            raise CheckpointError(f"tensor {name!r} is truncated")
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} for this model config")
        if tuple(expected[name].shape) != tuple(shape):
            raise CheckpointError(
                f"tensor {name!r} has shape {tuple(shape)}, config expects {tuple(expected[name].shape)}"
            )
        state[name] = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
    missing = sorted(set(expected) - set(state))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {missing}")
    model.load_state_dict(state)
    registry = FeatureRegistry.from_dict(doc.pop("registry"))
    doc.pop("model")
    return Checkpoint(model=model, registry=registry, meta=doc)


def state_hash(model: torch.nn.Module, prefixes: tuple[str, ...] = ()) -> str:
    """SHA-256 over the float32 bytes of the named tensors (all when no prefix given)."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        if prefixes and not name.startswith(prefixes):
            continue
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()
