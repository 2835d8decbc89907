"""Flat key=value run configuration with a strict schema.

Example::

    task = flow
    model.D = 64
    model.d = 32
    model.layers = 2
    model.head_dim = 8
    model.K_prototypes = 8
    model.T_cluster = 3
    model.sinkhorn_reg = 0.05
    model.T_dec = 8
    model.patch = 8
    model.hidden_width = 96
    train.steps = 2000
    train.batch = 8
    train.lr_max = 3e-4
    train.schedule = onecycle
    train.gamma = 0.8
    train.silog_lambda = 0.85
    train.silog_alpha = 10
    train.seed = 0
    data.train_manifest = data/train.manifest
    data.val_manifest = data/val.manifest
    io.out_dir = runs/toy_flow

Unknown keys are an error (catches typos).  Joint-task configs use
``data.train_manifest_flow`` / ``_depth`` and matching val keys instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from .errors import ConfigError
from .model import ModelConfig

_MODEL_INT_KEYS = {"D", "d", "layers", "head_dim", "K_prototypes", "T_cluster",
                   "T_dec", "patch", "hidden_width", "sinkhorn_iters",
                   "lookup_radius"}
_MODEL_FLOAT_KEYS = {"sinkhorn_reg"}


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    lr_max: float = 3e-4
    schedule: str = "onecycle"
    gamma: float = 0.8
    silog_lambda: float = 0.85
    silog_alpha: float = 10.0
    seed: int = 0
    log_every: int = 50
    val_every: int = 250
    val_samples: int = 8


@dataclass
class DataConfig:
    train_manifest: Optional[str] = None
    val_manifest: Optional[str] = None
    train_manifest_flow: Optional[str] = None
    train_manifest_depth: Optional[str] = None
    val_manifest_flow: Optional[str] = None
    val_manifest_depth: Optional[str] = None


@dataclass
class Config:
    task: str = "flow"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "run"

    def validate(self) -> "Config":
        if self.task not in ("flow", "depth", "joint"):
            raise ConfigError(f"task must be flow|depth|joint, got {self.task!r}")
        if self.train.steps < 0 or self.train.batch < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch >= 1")
        if not 0 < self.train.gamma <= 1:
            raise ConfigError(f"train.gamma must be in (0,1], got {self.train.gamma}")
        if self.train.lr_max <= 0:
            raise ConfigError("train.lr_max must be positive")
        if self.train.schedule not in ("onecycle", "constant"):
            raise ConfigError(f"unknown schedule {self.train.schedule!r}")
        if self.task == "joint":
            need = ("train_manifest_flow", "train_manifest_depth",
                    "val_manifest_flow", "val_manifest_depth")
        else:
            need = ("train_manifest", "val_manifest")
        for key in need:
            if getattr(self.data, key) is None:
                raise ConfigError(f"task {self.task!r} requires data.{key}")
        # model invariants (including K <= token count) are checked at build
        # time, once image_size is bound from the training manifest
        return self


def _parse_scalar(key: str, value: str, kind: type):
    try:
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {value!r}") from None
    return value


def parse_config_text(text: str, source: str = "<config>") -> Config:
    cfg = Config()
    seen = set()
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{source}:{ln}: duplicate key {key!r}")
        seen.add(key)
        if key == "task":
            cfg.task = value
        elif key == "io.out_dir":
            cfg.out_dir = value
        elif key.startswith("model."):
            sub = key[len("model."):]
            if sub in _MODEL_INT_KEYS:
                setattr(cfg.model, sub, _parse_scalar(key, value, int))
            elif sub in _MODEL_FLOAT_KEYS:
                setattr(cfg.model, sub, _parse_scalar(key, value, float))
            else:
                raise ConfigError(f"{source}:{ln}: unknown key {key!r}")
        elif key.startswith("train."):
            sub = key[len("train."):]
            if sub in ("steps", "batch", "seed", "log_every", "val_every",
                       "val_samples"):
                setattr(cfg.train, sub, _parse_scalar(key, value, int))
            elif sub in ("lr_max", "gamma", "silog_lambda", "silog_alpha"):
                setattr(cfg.train, sub, _parse_scalar(key, value, float))
            elif sub == "schedule":
                cfg.train.schedule = value
            else:
                raise ConfigError(f"{source}:{ln}: unknown key {key!r}")
        elif key.startswith("data."):
            sub = key[len("data."):]
            if not hasattr(cfg.data, sub):
                raise ConfigError(f"{source}:{ln}: unknown key {key!r}")
            setattr(cfg.data, sub, value)
        else:
            raise ConfigError(f"{source}:{ln}: unknown key {key!r}")
    return cfg


def load_config(path) -> Config:
    """Parse and validate a config file.

    The model's image_size is bound later, from the training manifest;
    full validation happens again at build time.
    """
    cfg = parse_config_text(Path(path).read_text(), source=str(path))
    if cfg.task not in ("flow", "depth", "joint"):
        raise ConfigError(f"{path}: task must be flow|depth|joint")
    return cfg
