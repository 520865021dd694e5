"""Parameter checkpoints.

A checkpoint is a zip archive holding one ``<name>.npy`` member per tensor and
a ``manifest.json`` member::

    {
      "format": "acda-checkpoint",
      "version": 1,
      "backbone": {...BackboneSpec fields...},
      "projection": {"variant": ..., "target_shape": [...]},
      "tensors": [{"name": "backbone.blocks.0.weight", "shape": [8, 1, 3, 3], "dtype": "float32"}, ...],
      "meta": {...free-form, e.g. seed and config hash...}
    }

Tensor names are ``state_dict`` keys of :class:`acda.trainer.ACDAModel`.
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneSpec
from .projection import ProjectionSpec

FORMAT = "acda-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model, path, meta=None) -> Path:
    path = Path(path)
    state = model.state_dict()
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "backbone": dataclasses.asdict(model.backbone.spec),
        "projection": dataclasses.asdict(model.projection.spec),
        "tensors": [],
        "meta": meta or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy()
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            zf.writestr(f"{name}.npy", buf.getvalue())
            manifest["tensors"].append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
    except (zipfile.BadZipFile, KeyError) as e:
        raise CheckpointError(f"{path} is not a checkpoint archive: {e}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: unexpected format {manifest.get('format')!r}")
    return manifest


def read_tensors(path) -> dict:
    manifest = read_manifest(path)
    out = {}
    with zipfile.ZipFile(path) as zf:
        for entry in manifest["tensors"]:
            arr = np.load(io.BytesIO(zf.read(f"{entry['name']}.npy")), allow_pickle=False)
            if list(arr.shape) != entry["shape"] or str(arr.dtype) != entry["dtype"]:
                raise CheckpointError(f"{entry['name']}: stored array disagrees with manifest")
            out[entry["name"]] = arr
    return out


def load_into(model, path):
    """Copy checkpoint tensors into ``model``, refusing any name or shape mismatch."""
    tensors = read_tensors(path)
    state = model.state_dict()
    missing = sorted(set(state) - set(tensors))
    unexpected = sorted(set(tensors) - set(state))
    if missing or unexpected:
        raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {unexpected}")
    for name, arr in tensors.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"{name}: checkpoint shape {tuple(arr.shape)} vs model shape {tuple(state[name].shape)}"
            )
    model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    return model


def load_checkpoint(path):
    """Rebuild the model described by the manifest and load its parameters."""
    from .trainer import ACDAModel

    manifest = read_manifest(path)
    b = manifest["backbone"]
    spec = BackboneSpec(
        conv_blocks=tuple(tuple(blk) for blk in b["conv_blocks"]),
        tap_indices=tuple(b["tap_indices"]),
        embed_dim=b["embed_dim"],
        num_classes=b["num_classes"],
        input_shape=tuple(b["input_shape"]),
        kind=b["kind"],
    )
    p = manifest["projection"]
    model = ACDAModel(spec, ProjectionSpec(p["variant"], tuple(p["target_shape"])))
    dtypes = {e["dtype"] for e in manifest["tensors"]}
    if dtypes == {"float64"}:
        model = model.double()
    load_into(model, path)
    return model, manifest
