"""Weight files.

A weight file is an uncompressed ``.npz`` archive (readable with
``numpy.load(path, allow_pickle=False)``) holding:

``__header__``
    UTF-8 JSON stored as a uint8 array::

        {"format": "earface-weights", "version": 1, "kind": "backbone" | "model",
         "spec": {BackboneSpec fields}, ...}

    Model files also record ``tasks``, ``fusion_mode``, ``modality``,
    ``center_alpha`` and free-form ``metadata`` (stage provenance).
every other key
    One float32 array per ``state_dict`` entry, named by its module path
    (``features.0.weight``, ``head.age.bias`` ...), with its shape. Model files
    add ``center_bank.<task>`` arrays for the center-loss banks.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, PipelineError
from .losses import CenterBank

FORMAT_NAME = "earface-weights"
FORMAT_VERSION = 1
HEADER_KEY = "__header__"
BANK_PREFIX = "center_bank."


def _encode_header(header: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def _write(path: Path, header: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, **header}
    with open(path, "wb") as fh:
        np.savez(fh, **{HEADER_KEY: _encode_header(header)}, **arrays)
    return path


def read_weights(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)`` from a weight file."""
    path = Path(path)
    if not path.is_file():
        raise PipelineError(f"weight file not found: {path}")
    with np.load(path, allow_pickle=False) as npz:
        if HEADER_KEY not in npz.files:
            raise ConfigError(f"{path} is not an {FORMAT_NAME} file (no header)")
        header = json.loads(npz[HEADER_KEY].tobytes().decode("utf-8"))
        arrays = {k: npz[k] for k in npz.files if k != HEADER_KEY}
    if header.get("format") != FORMAT_NAME:
        raise ConfigError(f"{path}: unknown format {header.get('format')!r}")
    if header.get("version", 0) > FORMAT_VERSION:
        raise ConfigError(f"{path}: format version {header['version']} is newer than supported {FORMAT_VERSION}")
    return header, arrays


def _state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    out = {}
    for name, t in module.state_dict().items():
        arr = t.detach().cpu().numpy()
        out[name] = arr.astype(np.float32) if arr.dtype.kind == "f" else arr
    return out


def _load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], path) -> None:
    state = module.state_dict()
    missing = [k for k in state if k not in arrays]
    if missing:
        raise ConfigError(f"{path}: missing weights for {missing[:5]}")
    new_state = {}
    for k, ref in state.items():
        arr = arrays[k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise ConfigError(f"{path}: {k} has shape {arr.shape}, expected {tuple(ref.shape)}")
        new_state[k] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(new_state)


def save_backbone_weights(backbone, path: str | Path) -> Path:
    return _write(path, {"kind": "backbone", "spec": backbone.spec.to_dict()}, _state_arrays(backbone))


def load_backbone_weights(path: str | Path, spec=None):
    """Build a backbone from a weight file.

    ``spec`` (optional) overrides everything but the layer shapes; a
    6-channel ``spec`` over a 3-channel file gets its first layer widened.
    """
    from .model import Backbone, BackboneSpec, adapt_input_channels

    header, arrays = read_weights(path)
    stored = BackboneSpec.from_dict({**header["spec"], "pretrained_weights_ref": None})
    target = stored if spec is None else spec
    from dataclasses import replace

    build_spec = replace(target, input_channels=stored.input_channels, pretrained_weights_ref=None)
    backbone = Backbone(build_spec)
    _load_state(backbone, arrays, path)
    if target.input_channels == 6 and stored.input_channels == 3:
        adapt_input_channels(backbone, 6)
    elif target.input_channels != stored.input_channels:
        raise ConfigError(f"{path}: cannot load {stored.input_channels}-channel weights into a {target.input_channels}-channel spec")
    return backbone


def save_model(model, path: str | Path, center_banks: Optional[dict[str, CenterBank]] = None) -> Path:
    arrays = _state_arrays(model)
    banks = center_banks if center_banks is not None else getattr(model, "center_banks", {}) or {}
    for task, bank in banks.items():
        arrays[BANK_PREFIX + task] = bank.centers.detach().cpu().numpy().astype(np.float32)
    alpha = next(iter(banks.values())).alpha if banks else None
    header = {
        "kind": "model",
        "spec": model.spec.to_dict(),
        "tasks": list(model.tasks),
        "fusion_mode": model.fusion_mode,
        "modality": model.modality,
        "center_alpha": alpha,
        "metadata": getattr(model, "metadata", {}),
    }
    return _write(path, header, arrays)


def load_model(path: str | Path):
    """Rebuild an :class:`AgeGenderNet` (with ``center_banks``) from a model file."""
    from .model import AgeGenderNet, BackboneSpec

    header, arrays = read_weights(path)
    if header.get("kind") != "model":
        raise ConfigError(f"{path} holds {header.get('kind')!r} weights, not a model")
    spec = BackboneSpec.from_dict({**header["spec"], "pretrained_weights_ref": None})
    modality = header["modality"] if header["fusion_mode"] == "none" else "profile"
    base_spec = spec
    if header["fusion_mode"] == "channel":
        from dataclasses import replace

        base_spec = replace(spec, input_channels=3)
    model = AgeGenderNet(base_spec, header["tasks"], header["fusion_mode"], modality)
    state_arrays = {k: v for k, v in arrays.items() if not k.startswith(BANK_PREFIX)}
    _load_state(model, state_arrays, path)
    model.metadata = header.get("metadata", {})
    alpha = header.get("center_alpha") or 0.5
    model.center_banks = {
        k[len(BANK_PREFIX):]: CenterBank(torch.from_numpy(np.array(v)), alpha)
        for k, v in arrays.items()
        if k.startswith(BANK_PREFIX)
    }
    return model
