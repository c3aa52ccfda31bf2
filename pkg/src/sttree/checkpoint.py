"""Versioned checkpoint format.

``<path>`` holds the little-endian float64 tensors concatenated in manifest
order; ``<path>.json`` is the manifest (format version, config snapshot, and
``name``/``shape``/``offset`` per tensor).
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict

import numpy as np

from .model import ModelConfig, STTreeModel

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def manifest_path(path) -> str:
    return os.fspath(path) + ".json"


def save_checkpoint(model: STTreeModel, path, extra: dict | None = None) -> None:
    entries = []
    offset = 0
    chunks = []
    for name, t in model.store.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        offset += len(raw)
        chunks.append(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "extra": extra or {},
        "blob_bytes": offset,
        "tensors": entries,
    }
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    with open(manifest_path(path), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelConfig, "OrderedDict[str, np.ndarray]", dict]:
    """Return ``(config, tensors, manifest)``; raises :class:`CheckpointError` on any defect."""
    try:
        with open(manifest_path(path), encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(path, "rb") as fh:
            blob = fh.read()
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    try:
        entries = manifest["tensors"]
        config = ModelConfig.from_dict(manifest["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed manifest: {exc}") from exc
    expected = sum(8 * int(np.prod(e["shape"], dtype=np.int64)) for e in entries)
    if expected != len(blob) or manifest.get("blob_bytes", expected) != len(blob):
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest describes {expected}")
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    pos = 0
    for e in entries:
        n = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] != pos:
            raise CheckpointError(f"{e['name']}: offset {e['offset']} != {pos}")
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).astype(np.float64)
        tensors[e["name"]] = arr.reshape(e["shape"])
        pos += 8 * n
    return config, tensors, manifest


def load_model(path) -> STTreeModel:
    config, tensors, _ = load_checkpoint(path)
    model = STTreeModel(config)
    try:
        model.store.load_state_dict(tensors)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    return model
