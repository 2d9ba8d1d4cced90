"""Experiment configuration files (YAML) with environment overrides."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .losses import LossWeights
from .network import ModelConfig

ENV_PREFIX = "MTCYP_"


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    base_lr: float = 0.008
    momentum: float = 0.9
    weight_decay: float = 0.009
    warmup_iters: int = 100
    aug_prob: float = 0.5
    seed: int = 0
    mode: str = "multitask_tcl"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    tcl_reduction: str = "sum"
    detach_shared: bool = False
    eval_every: int = 1
    max_steps: int | None = None

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        for name in ("epochs", "batch_size", "base_lr", "warmup_iters", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.aug_prob <= 1:
            raise ValueError(f"aug_prob must lie in [0, 1], got {self.aug_prob}")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentConfig:
    tiles: str | None = None
    bands: list[str] | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    k: int = 10
    fold: int = 0
    fold_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "tiles": self.tiles,
            "bands": self.bands,
            "model": {k: v for k, v in self.model.to_dict().items() if k != "mode"},
            "train": self.train.to_dict(),
            "k": self.k,
            "fold": self.fold,
            "fold_seed": self.fold_seed,
        }

    def model_config(self, in_channels: int | None = None) -> ModelConfig:
        d = self.model.to_dict()
        d["mode"] = self.train.mode
        if in_channels is not None:
            d["in_channels"] = in_channels
        return ModelConfig(**d)


def _apply_env(raw: dict, environ) -> dict:
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        path = key[len(ENV_PREFIX):].lower().split("__")
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = yaml.safe_load(value)
    return raw


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    model = dict(raw.pop("model", None) or {})
    train = dict(raw.pop("train", None) or {})
    model.pop("mode", None)
    return ExperimentConfig(model=ModelConfig(**model), train=TrainConfig(**train), **raw)


def load_config(path: str | Path | None, environ=None) -> ExperimentConfig:
    """Read a YAML experiment config; ``MTCYP_SECTION__KEY`` variables override keys."""
    raw = {}
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    raw = _apply_env(raw, os.environ if environ is None else environ)
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
