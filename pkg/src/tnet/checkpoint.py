"""Checkpoint directories: manifest.json plus one TNS1 file per tensor."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .io import read_json, read_tns, write_json, write_tns
from .model import ModelConfig, ParamState, init_encoder, init_loc_head, init_seg_decoder
from .tensor import Tensor

FORMAT = 1
_ROLES = ("encoder", "posterior", "aux")


class CheckpointError(ValueError):
    pass


def _file_name(role: str, name: str) -> str:
    return f"{role}__{re.sub(r'[^A-Za-z0-9_.-]', '_', name)}.tns"


def save_checkpoint(root, states: Dict[str, Optional[ParamState]], meta: dict) -> Path:
    """Write every non-None state under ``root``; ``meta`` is echoed into the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    tensors = {}
    kinds = {}
    config = None
    for role, state in states.items():
        if role not in _ROLES:
            raise CheckpointError(f"unknown checkpoint role {role!r}")
        if state is None:
            continue
        config = state.config
        kinds[role] = state.kind
        for name, t in state.params.items():
            fname = _file_name(role, name)
            write_tns(root / fname, t.data)
            tensors[f"{role}/{name}"] = {"file": fname, "shape": list(t.shape)}
    if config is None:
        raise CheckpointError("nothing to save")
    manifest = {"format": FORMAT, "model": config.to_json(), "kinds": kinds, "tensors": tensors, **meta}
    write_json(root / "manifest.json", manifest)
    return root


def _template(role: str, kind: str, config: ModelConfig) -> ParamState:
    if role == "encoder":
        return init_encoder(config)
    if kind == "segmentation":
        return init_seg_decoder(config)
    if kind == "localization":
        return init_loc_head(config)
    raise CheckpointError(f"unknown posterior kind {kind!r} for role {role}")


def load_checkpoint(root):
    """Returns (manifest, {role: state}); shapes are checked against the stored config."""
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"{root} has no manifest.json")
    manifest = read_json(path)
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    config = ModelConfig.from_json(manifest["model"])
    states = {}
    for role, kind in manifest["kinds"].items():
        template = _template(role, kind, config)
        stored = {k.split("/", 1)[1]: v for k, v in manifest["tensors"].items() if k.split("/", 1)[0] == role}
        missing = sorted(set(template.params) - set(stored))
        extra = sorted(set(stored) - set(template.params))
        if missing or extra:
            raise CheckpointError(f"{role} tensors do not match the config: missing {missing}, unexpected {extra}")
        params = {}
        for name, ref in template.params.items():
            arr = read_tns(root / stored[name]["file"])
            if arr.shape != ref.shape:
                raise CheckpointError(
                    f"tensor {role}/{name} has shape {arr.shape} but the config expects {ref.shape}")
            params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        states[role] = type(template)(config, params, kind)
    return manifest, states
