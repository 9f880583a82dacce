"""Strict JSON configuration for the command-line pipeline.

Every section maps onto a dataclass owned by the module that consumes it.
Unknown keys anywhere are rejected with their dotted path.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ValidationError
from .model import ModelConfig
from .pretrain import PretrainConfig
from .train import TrainConfig
from .volumes import AugmentConfig, PhantomSpec, SplitRatios


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def build_dataclass(cls, data, path: str):
    """Instantiate ``cls`` from a JSON mapping, recursing into nested dataclass fields."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        hint = hints.get(name)
        sub = f"{path}.{name}"
        if dataclasses.is_dataclass(hint):
            kwargs[name] = build_dataclass(hint, value, sub)
        elif isinstance(value, dict):
            kwargs[name] = value
        else:
            kwargs[name] = _tuplify(value)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValidationError, TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def to_dict(obj) -> dict:
    return _jsonable(dataclasses.asdict(obj))


@dataclass
class DataConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    split: SplitRatios = field(default_factory=SplitRatios)
    seed: int = 0
    count: int = 8


@dataclass
class MCConfig:
    samples: int = 10
    threshold: int = 5
    overlap: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1 or not 1 <= self.threshold <= self.samples:
            raise ValidationError("mc.samples must be >= 1 and 1 <= mc.threshold <= mc.samples")
        if not 0.0 <= self.overlap <= 0.9:
            raise ValidationError("mc.overlap must lie in [0, 0.9]")


@dataclass
class EvalConfig:
    spacing_mm: tuple[float, float, float] | None = None


@dataclass
class GlobalConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mc: MCConfig = field(default_factory=MCConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def parse_config(data: dict) -> GlobalConfig:
    return build_dataclass(GlobalConfig, data, "config")


def load_config(path=None) -> GlobalConfig:
    if path is None:
        return GlobalConfig()
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(data)
