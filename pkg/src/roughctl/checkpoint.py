"""Single-file checkpoints: named tensors, schedule constants and a config hash."""

from __future__ import annotations

import hashlib
from dataclasses import replace
from pathlib import Path

import torch

from .backbone import NoiseSchedule
from .config import ModelConfig, config_hash, from_dict, to_dict
from .model import ControlledDiffusion

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def save_model(path: Path, model: ControlledDiffusion) -> str:
    """Backbone and condition branch under the ``backbone.`` / ``control.`` namespaces."""
    tensors = {name: p.detach().cpu().clone() for name, p in model.base_parameters()}
    for name, buf in model.unet.named_buffers(prefix="backbone"):
        tensors[name] = buf.detach().cpu().clone()
    blob = {
        "format_version": FORMAT_VERSION,
        "kind": "base",
        "config": to_dict(model.cfg),
        "config_hash": config_hash(model.cfg),
        "schedule": model.schedule.to_dict(),
        "tensors": tensors,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(blob, path)
    return file_hash(path)


def _read(path: Path, kind: str) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    if blob.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {blob.get('kind')!r}")
    return blob


def load_model(path: Path, guidance: float | None = None) -> ControlledDiffusion:
    """``guidance`` replaces the stored sampling default; it does not touch any weights."""
    blob = _read(path, "base")
    cfg = from_dict(ModelConfig, blob["config"])
    if config_hash(cfg) != blob["config_hash"]:
        raise CheckpointError(f"{path}: config hash mismatch")
    if guidance is not None:
        cfg = replace(cfg, guidance=float(guidance))
    has_control = any(k.startswith("control.") for k in blob["tensors"])
    model = ControlledDiffusion(cfg, with_control=has_control)
    model.schedule = NoiseSchedule.from_dict(blob["schedule"])
    unet = {k[len("backbone."):]: v for k, v in blob["tensors"].items() if k.startswith("backbone.")}
    model.unet.load_state_dict(unet)
    if has_control:
        ctrl = {k[len("control."):]: v for k, v in blob["tensors"].items() if k.startswith("control.")}
        model.control.load_state_dict(ctrl)
    for p in model.parameters():
        p.requires_grad_(False)
    return model.eval()


def save_predictor(path: Path, model: ControlledDiffusion, base_hash: str, extra: dict | None = None) -> str:
    """Predictor weights stored apart from the base so one base serves many predictors."""
    if model.predictor is None:
        raise CheckpointError("no predictor attached")
    blob = {
        "format_version": FORMAT_VERSION,
        "kind": "predictor",
        "granularity": model.predictor.granularity,
        "config": to_dict(model.cfg),
        "base_hash": base_hash,
        "extra": extra or {},
        "tensors": {k: v.detach().cpu().clone() for k, v in model.predictor.state_dict().items()},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(blob, path)
    return file_hash(path)


def load_predictor(path: Path, model: ControlledDiffusion, base_hash: str | None = None) -> ControlledDiffusion:
    """Attach stored predictors to ``model``; ``base_hash`` guards against a mismatched base."""
    blob = _read(path, "predictor")
    if base_hash is not None and blob["base_hash"] != base_hash:
        raise CheckpointError(f"{path}: trained against base {blob['base_hash']}, not {base_hash}")
    if model.predictor is not None:
        model.detach_predictors()
    model.attach_predictors(granularity=blob["granularity"])
    model.predictor.load_state_dict(blob["tensors"])
    for p in model.predictor.parameters():
        p.requires_grad_(False)
    return model
