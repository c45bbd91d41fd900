"""Versioned, checksummed checkpoint files.

Layout: 8-byte magic, uint32 format version, 32-byte SHA-256 of the payload,
then a ``torch.save`` payload holding parameters, optimizer state, the
hyper-parameter hash, the epoch counter and RNG states.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import warnings
from pathlib import Path

import torch

from .models import ModelHandle, build_backbone

MAGIC = b"CXRSTCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sI32s")


class CheckpointError(RuntimeError):
    """Checkpoint file is truncated, corrupted or from an unsupported version."""


class HyperParamMismatchWarning(UserWarning):
    pass


def hp_hash(hp) -> str:
    d = hp if isinstance(hp, dict) else hp.to_dict()
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(
    model: ModelHandle,
    path,
    *,
    hp=None,
    optimizer_state: dict | None = None,
    epoch: int | None = None,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    payload = {
        "backbone": model.backbone,
        "num_classes": model.num_classes,
        "state_dict": model.module.state_dict(),
        "optimizer_state": optimizer_state,
        "hp_hash": hp_hash(hp) if hp is not None else None,
        "hp": (hp if isinstance(hp, dict) else hp.to_dict()) if hp is not None else None,
        "epoch": epoch,
        "numpy_rng_state": rng_state,
        "torch_rng_state": torch.get_rng_state(),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, hashlib.sha256(body).digest())
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    """Validate and decode the raw payload dictionary."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic, version, digest = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
    body = raw[_HEADER.size :]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    try:
        return torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"{path}: cannot decode payload: {e}") from e


def load_checkpoint(path, hp=None, backbone=None) -> ModelHandle:
    """Rebuild the model stored at ``path``.

    ``hp`` (if given) is hashed and compared with the stored hash; a mismatch
    only warns. ``backbone`` overrides the stored name and may be a factory
    callable for custom architectures.
    """
    payload = read_checkpoint(path)
    if hp is not None and payload.get("hp_hash") not in (None, hp_hash(hp)):
        warnings.warn(
            f"{path}: hyper-parameter hash {payload['hp_hash']} differs from current {hp_hash(hp)}",
            HyperParamMismatchWarning,
            stacklevel=2,
        )
    num_classes = int(payload["num_classes"])
    spec = backbone if backbone is not None else payload["backbone"]
    module = build_backbone(spec, num_classes) if isinstance(spec, str) else spec()
    module.load_state_dict(payload["state_dict"])
    module.eval()
    name = spec if isinstance(spec, str) else payload["backbone"]
    return ModelHandle(module, backbone=name, num_classes=num_classes)
