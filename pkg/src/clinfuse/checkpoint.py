"""Checkpoint container: named tensors plus a manifest of shapes and the config hash."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import torch

from .errors import CheckpointMismatchError

CHECKPOINT_FORMAT = "clinfuse-checkpoint/1"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def save_checkpoint(path, tensors: dict, config, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().clone() for k, v in tensors.items()}
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config_hash": config_hash(config),
        "config": canonical_json(config),
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype)} for k, v in tensors.items()},
        "extra": canonical_json(extra or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"manifest": manifest, "tensors": tensors}, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, config=None):
    """Returns (tensors, manifest). Refuses to load when ``config`` hashes differently."""
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    manifest = blob.get("manifest", {})
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatchError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if config is not None and manifest["config_hash"] != config_hash(config):
        raise CheckpointMismatchError(
            f"{path}: config hash {manifest['config_hash']} does not match {config_hash(config)}"
        )
    tensors = blob["tensors"]
    for name, meta in manifest["tensors"].items():
        if name not in tensors or list(tensors[name].shape) != meta["shape"]:
            raise CheckpointMismatchError(f"{path}: tensor {name!r} missing or reshaped")
    manifest = dict(manifest)
    manifest["config"] = json.loads(manifest["config"])
    manifest["extra"] = json.loads(manifest["extra"])
    return tensors, manifest
