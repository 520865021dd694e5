"""Experiment configuration: nested dataclasses loaded from TOML.

Unknown keys are rejected so that a misspelt hyper-parameter fails loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import ShiftSpec
from .projection import VARIANTS


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field = field_path


@dataclass(frozen=True)
class DataConfig:
    name: str = "shapes"
    n_source: int = 480
    n_target: int = 480
    brightness: float = 0.4
    noise: float = 0.15
    thickness: float = 1.0
    rotation: float = 30.0
    path: str = ""

    def shift(self) -> ShiftSpec:
        return ShiftSpec(self.brightness, self.noise, self.thickness)


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "conv"
    conv_blocks: tuple = ((8, 3, 1), (16, 3, 2), (32, 3, 2), (32, 3, 1))
    tap_indices: tuple = (1, 2, 3)
    embed_dim: int = 64


@dataclass(frozen=True)
class ProjectionConfig:
    variant: str = "conv-3-residual"
    target_shape: tuple = (32, 4, 4)


@dataclass(frozen=True)
class KernelConfig:
    # 0 selects the per-batch median heuristic
    bandwidth: float = 0.0
    factors: tuple = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class TrainConfig:
    epochs_pretrain: int = 10
    epochs_align: int = 40
    batch_size: int = 64
    lr: float = 0.001
    momentum: float = 0.9
    delta: float = 0.7
    lam: float = 0.3
    seeds: tuple = (0, 1, 2)
    kmeans_iters: int = 20
    dtype: str = "float32"
    threads: int = 1


@dataclass(frozen=True)
class VariantConfig:
    use_attention: bool = True
    use_cross_layer: bool = True
    use_label_conditioning: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    kernel: KernelConfig = field(default_factory=KernelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)

    @property
    def m(self) -> int:
        return len(self.backbone.tap_indices)

    def with_overrides(self, **sections) -> "ExperimentConfig":
        """``cfg.with_overrides(train={"lam": 0})`` returns a validated copy."""
        new = {}
        for name, values in sections.items():
            new[name] = replace(getattr(self, name), **values)
        return validate(replace(self, **new))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_toml(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_toml_value(value)}")
            lines.append("")
        return "\n".join(lines)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def _coerce(path: str, default: Any, value: Any):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return _tuplify(list(value))
    return value


def from_dict(raw: dict) -> ExperimentConfig:
    sections = {}
    top = {f.name: f for f in fields(ExperimentConfig)}
    for name, body in raw.items():
        if name not in top:
            raise ConfigError(name, f"unknown section (expected one of {sorted(top)})")
        if not isinstance(body, dict):
            raise ConfigError(name, "section must be a table")
        cls = top[name].default_factory
        defaults = cls()
        known = {f.name for f in fields(cls)}
        values = {}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"{name}.{key}", f"unknown key (expected one of {sorted(known)})")
            values[key] = _coerce(f"{name}.{key}", getattr(defaults, key), value)
        sections[name] = cls(**values)
    return validate(ExperimentConfig(**sections))


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    d, t, b, p, k = cfg.data, cfg.train, cfg.backbone, cfg.projection, cfg.kernel
    if d.name not in ("shapes", "twomoons", "folder", "file"):
        raise ConfigError("data.name", f"unknown dataset {d.name!r}")
    if d.name in ("folder", "file") and not d.path:
        raise ConfigError("data.path", f"required for dataset {d.name!r}")
    if d.n_source < 1 or d.n_target < 1:
        raise ConfigError("data.n_source", "sample counts must be positive")
    try:
        d.shift()
    except ValueError as e:
        raise ConfigError("data.shift", str(e)) from None
    if not 0 <= d.rotation <= 90:
        raise ConfigError("data.rotation", "must lie in [0, 90]")
    if t.epochs_pretrain < 0:
        raise ConfigError("train.epochs_pretrain", "must be >= 0")
    if t.epochs_align < 0:
        raise ConfigError("train.epochs_align", "must be >= 0")
    if t.batch_size < 2:
        raise ConfigError("train.batch_size", "must be >= 2")
    if not t.lr > 0:
        raise ConfigError("train.lr", "must be > 0")
    if not 0 <= t.momentum < 1:
        raise ConfigError("train.momentum", "must lie in [0, 1)")
    if not 0 <= t.delta <= 1:
        raise ConfigError("train.delta", "must lie in [0, 1]")
    if not t.lam >= 0:
        raise ConfigError("train.lam", "must be >= 0")
    if not t.seeds or any(not isinstance(s, int) or s < 0 for s in t.seeds):
        raise ConfigError("train.seeds", "must be a nonempty list of nonnegative integers")
    if t.dtype not in ("float32", "float64"):
        raise ConfigError("train.dtype", "must be 'float32' or 'float64'")
    if t.kmeans_iters < 1:
        raise ConfigError("train.kmeans_iters", "must be >= 1")
    if t.threads < 1:
        raise ConfigError("train.threads", "must be >= 1")
    if b.kind not in ("conv", "mlp"):
        raise ConfigError("backbone.kind", f"unknown kind {b.kind!r}")
    if not b.conv_blocks or any(len(blk) != 3 for blk in b.conv_blocks):
        raise ConfigError("backbone.conv_blocks", "must be a list of [out_channels, kernel_size, stride]")
    if not b.tap_indices:
        raise ConfigError("backbone.tap_indices", "need at least one tap")
    if p.variant not in VARIANTS:
        raise ConfigError("projection.variant", f"unknown variant {p.variant!r}; choose from {list(VARIANTS)}")
    if len(p.target_shape) != 3 or min(p.target_shape) < 1:
        raise ConfigError("projection.target_shape", "must be three positive integers")
    if k.bandwidth < 0:
        raise ConfigError("kernel.bandwidth", "must be >= 0 (0 selects the median heuristic)")
    if not k.factors or any(f <= 0 for f in k.factors):
        raise ConfigError("kernel.factors", "must be positive")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("config", f"cannot parse {path}: {e}") from None
    return from_dict(raw)
