"""Run configuration: a flat key/value file plus ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    task: str = "panoptic"
    image_size: int = 64
    num_classes: int = 5
    thing_classes: list[int] = field(default_factory=lambda: [0, 1, 2])
    num_masks: int = 100
    num_layers: int = 9
    dim: int = 256
    heads: int = 8
    backbone_widths: list[int] = field(default_factory=lambda: [32, 48, 64, 96, 128, 128])
    T: int = 1000
    schedule: str = "cosine"
    scale: float = 0.1
    encoding: str = "binary"
    steps: int = 1
    init_noise: str = "clamp"
    loss_weights: list[float] = field(default_factory=lambda: [2.0, 5.0, 5.0])
    optimizer: str = "adamw"
    lr: float = 1e-4
    weight_decay: float = 0.05
    lr_drops: list[float] = field(default_factory=lambda: [0.9, 0.95])
    lr_drop_factor: float = 0.1
    grad_clip: float = 1.0
    batch_size: int = 8
    iterations: int = 1000
    flip: bool = True
    scale_jitter: float = 0.25
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 50
    object_threshold: float = 0.8
    overlap_threshold: float = 0.5
    topk: int = 100
    data_dir: str = "data/train"
    val_dir: str = "data/val"
    out_dir: str = "runs/default"

    def validate(self) -> "Config":
        err = []
        if self.task not in ("panoptic", "instance", "semantic"):
            err.append(f"task must be panoptic/instance/semantic, got {self.task!r}")
        if self.image_size <= 0 or self.image_size % 32:
            err.append(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.num_classes < 1:
            err.append("num_classes must be >= 1")
        if any(not 0 <= c < self.num_classes for c in self.thing_classes):
            err.append("thing_classes must lie in [0, num_classes)")
        if len(set(self.thing_classes)) != len(self.thing_classes):
            err.append("thing_classes has duplicates")
        for name in ("num_masks", "num_layers", "dim", "heads", "T", "steps", "batch_size", "iterations",
                     "checkpoint_every", "log_every", "topk"):
            if getattr(self, name) < 1:
                err.append(f"{name} must be >= 1")
        if self.dim % self.heads:
            err.append("dim must be divisible by heads")
        if len(self.backbone_widths) != 6 or any(w < 1 for w in self.backbone_widths):
            err.append("backbone_widths needs 6 positive entries")
        if self.schedule != "cosine":
            err.append(f"unknown schedule {self.schedule!r}")
        if self.scale <= 0:
            err.append("scale must be positive")
        if self.encoding not in ("binary", "shuffle"):
            err.append(f"encoding must be binary or shuffle, got {self.encoding!r}")
        if self.init_noise not in ("clamp", "scale"):
            err.append(f"init_noise must be clamp or scale, got {self.init_noise!r}")
        if self.steps > self.T + 1:
            err.append("steps must be <= T + 1")
        if len(self.loss_weights) != 3 or any(w < 0 for w in self.loss_weights):
            err.append("loss_weights needs 3 non-negative entries")
        if self.optimizer != "adamw":
            err.append(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.weight_decay < 0:
            err.append("lr must be positive and weight_decay non-negative")
        if any(not 0 < f < 1 for f in self.lr_drops) or list(self.lr_drops) != sorted(self.lr_drops):
            err.append("lr_drops must be increasing fractions in (0, 1)")
        if not 0 < self.lr_drop_factor <= 1:
            err.append("lr_drop_factor must be in (0, 1]")
        if self.grad_clip <= 0:
            err.append("grad_clip must be positive")
        if not 0 <= self.scale_jitter < 1:
            err.append("scale_jitter must be in [0, 1)")
        if not 0 <= self.object_threshold <= 1 or not 0 <= self.overlap_threshold <= 1:
            err.append("thresholds must be in [0, 1]")
        if err:
            raise ConfigError("; ".join(err))
        return self

    @property
    def mask_size(self) -> int:
        return self.image_size // 4

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "Config":
        return from_dict({**self.to_dict(), **kw})


_FIELDS = {f.name: f for f in fields(Config)}


def _coerce(name: str, value):
    default = getattr(Config(), name)
    kind = type(default)
    try:
        if kind is bool:
            if isinstance(value, str):
                low = value.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            if isinstance(value, bool):
                return value
            raise ValueError(value)
        if kind is list:
            if isinstance(value, str):
                value = yaml.safe_load(value if value.startswith("[") else f"[{value}]")
            if not isinstance(value, list):
                raise ValueError(value)
            elem = type(default[0])
            return [elem(v) for v in value]
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            if isinstance(value, bool):
                raise ValueError(value)
            return int(float(value)) if isinstance(value, str) else int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {value!r} (expected {kind.__name__})") from None


def from_dict(d: dict) -> Config:
    unknown = sorted(set(d) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return Config(**{k: _coerce(k, v) for k, v in d.items()}).validate()


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides=None) -> Config:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: not valid key/value text: {e}") from None
        if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
            raise ConfigError(f"{path}: config must be a flat key/value mapping")
    data.update(parse_overrides(overrides) if not isinstance(overrides, dict) else overrides)
    return from_dict(data)


def dump_config(cfg: Config, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
