"""SD2C checkpoints: magic, version, JSON header, little-endian float32 payload in manifest order."""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError, MissingArtifactError
from .models import ModelConfig, Role, SteeringVariant, to_dict
from .steering import SteeringState
from .tensor import Tensor
from .transformer import TransformerModel

logger = logging.getLogger(__name__)

MAGIC = b"SD2C"
VERSION = 1
_PREFIX = struct.Struct("<4sII")
_PAYLOAD_DTYPE = np.dtype("<f4")


@dataclass
class Checkpoint:
    model: TransformerModel
    steering: SteeringState | None = None
    meta: dict[str, Any] = field(default_factory=dict)


def _tensors(model: TransformerModel, steering: SteeringState | None) -> dict[str, Tensor]:
    tensors = dict(model.parameters())
    if steering is not None:
        tensors.update(steering.parameters())
    return tensors


def encode(model: TransformerModel, steering: SteeringState | None = None, meta: dict[str, Any] | None = None) -> bytes:
    tensors = _tensors(model, steering)
    manifest = []
    offset = 0
    for name, t in tensors.items():
        if t.dtype != np.float32:
            raise CheckpointError(f"{name} is {t.dtype}; checkpoints hold float32 tensors only")
        manifest.append({"name": name, "shape": list(t.shape), "dtype": "f32", "offset": offset})
        offset += t.size * _PAYLOAD_DTYPE.itemsize
    header = {
        "role": str(model.role),
        "config": to_dict(model.config),
        "variant": None if steering is None else str(steering.variant),
        "steering_layers": None if steering is None else steering.n_layers,
        "manifest": manifest,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype=_PAYLOAD_DTYPE).tobytes() for t in tensors.values())
    return _PREFIX.pack(MAGIC, VERSION, len(header_bytes)) + header_bytes + payload


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint prefix")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + header_len
    if len(blob) < start:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[_PREFIX.size : start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e

    payload = memoryview(blob)[start:]
    expected = sum(int(np.prod(e["shape"], dtype=np.int64)) * _PAYLOAD_DTYPE.itemsize for e in header["manifest"])
    if len(payload) != expected:
        raise CheckpointError(f"payload holds {len(payload)} bytes, manifest needs {expected}")

    tensors: dict[str, Tensor] = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE, count=count, offset=entry["offset"])
        tensors[entry["name"]] = Tensor(arr.astype(np.float32).reshape(shape))

    config = ModelConfig(**header["config"])
    model_params = {n: t for n, t in tensors.items() if not n.startswith("steer.")}
    model = TransformerModel(config, model_params, Role(header["role"]))
    steering = None
    if header.get("variant") is not None:
        steer_params = {n: t for n, t in tensors.items() if n.startswith("steer.")}
        steering = SteeringState(SteeringVariant(header["variant"]), steer_params, int(header["steering_layers"]))
    return Checkpoint(model, steering, header.get("meta", {}))


def save_checkpoint(
    path: str | Path,
    model: TransformerModel,
    steering: SteeringState | None = None,
    meta: dict[str, Any] | None = None,
) -> Path:
    path = Path(path)
    blob = encode(model, steering, meta)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    logger.info("wrote %s (%d bytes)", path, len(blob))
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError([str(path)])
    return decode(path.read_bytes())
