"""Configuration dataclasses with JSON round-trip and layered overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class ModelConfig:
    image_size: int = 32
    channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    emb_dim: int = 64
    num_classes: int = 9
    timesteps: int = 400
    beta_start: float = 1e-4
    beta_end: float = 0.028
    # classifier-free guidance: labels dropped to a null class during pretraining
    class_dropout: float = 0.1
    guidance: float = 2.0
    # predictor: hidden widths as fractions of the block width
    predictor_hidden: tuple[float, ...] = (1.0, 0.5, 0.25)
    predictor_kernel: int = 3
    predictor_init_bias: float = 2.0
    predictor_granularity: str = "local"  # "local" | "global"

    @property
    def depth(self) -> int:
        return len(self.widths)


@dataclass
class PretrainConfig:
    n_renders: int = 6000
    kind: str = "depthlike"
    backbone_steps: int = 12000
    control_steps: int = 6000
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0


@dataclass
class TrainConfig:
    lambda_c: float = 0.01
    alpha_conflict: float = 0.2
    alpha_bg: float = 0.8
    weight_decay: float = 1e-5
    epochs: int = 200
    learning_rate: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    finetune_control: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha_conflict < self.alpha_bg <= 1.0:
            raise ValueError("need 0 <= alpha_conflict < alpha_bg <= 1")
        if self.lambda_c < 0:
            raise ValueError("lambda_c must be >= 0")


@dataclass
class SweepConfig:
    alpha_grid: tuple[float, ...] = (1.0, 0.8, 0.6, 0.4, 0.2, 0.0)
    dilation_radius: int = 2
    tau_cls: float = 0.9
    tau_bg: float = 0.08
    sample_steps: int = 25

    def __post_init__(self):
        if self.dilation_radius < 0:
            raise ValueError("dilation_radius must be >= 0")
        if list(self.alpha_grid) != sorted(self.alpha_grid, reverse=True):
            raise ValueError("alpha_grid must be descending")


@dataclass
class EvalConfig:
    sample_steps: int = 50
    n_items: int = 100
    n_tune: int = 40
    mild_threshold: float = 0.3
    seeds: tuple[int, ...] = (0,)


@dataclass
class DataConfig:
    n_build: int = 2000
    n_samples: int = 1000
    n_heldout: int = 200
    build_seed: int = 1
    heldout_seed: int = 2
    eval_seed: int = 3
    tune_seed: int = 4

    def __post_init__(self):
        if self.n_samples > self.n_build:
            raise ValueError("n_samples cannot exceed n_build")


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def to_dict(cfg) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def from_dict(cls, data: dict):
    proto = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise KeyError(f"unknown config key {cls.__name__}.{key}")
        current = getattr(proto, key)
        if dataclasses.is_dataclass(current):
            kwargs[key] = from_dict(type(current), value)
        elif isinstance(current, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_hash(cfg) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _set_dotted(tree: dict, dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = tree
    for p in parents:
        node = node.setdefault(p, {})
    node[leaf] = value


def layered(cls, file: Path | None = None, overrides: dict[str, Any] | None = None):
    """Built-in defaults, then the JSON file, then dotted ``overrides`` (highest precedence)."""
    tree = to_dict(cls())
    if file is not None:
        _merge(tree, json.loads(Path(file).read_text()))
    for dotted, value in (overrides or {}).items():
        _set_dotted(tree, dotted, value)
    return from_dict(cls, tree)


def _merge(base: dict, update: dict) -> None:
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v
