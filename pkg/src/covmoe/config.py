"""Experiment configuration: nested frozen dataclasses read from JSON.

Unknown keys and ill-typed values raise ``ConfigError``; the fully resolved
config (every default filled in) is what gets hashed and written next to
run outputs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .cov_smoe import MoEConfig
from .datahub import ConfigError
from .fedsim import FedConfig
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # or "csv"
    n_regions: int = 3
    n_days: int = 100
    noise: float = 0.05
    csv_paths: tuple[str, ...] = ()  # one file per region
    target: str = "price"
    channels: tuple[str, ...] = ("price", "load")
    covariates: tuple[str, ...] = ("temperature",)
    stride: int = 12
    split: tuple[float, ...] = (0.6, 0.1, 0.1, 0.2)

    def __post_init__(self):
        if self.source not in ("synthetic", "csv"):
            raise ValueError(f"unknown data source {self.source!r}")
        if self.source == "csv" and not self.csv_paths:
            raise ValueError("csv source needs csv_paths")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass(frozen=True)
class EvalConfig:
    m: int = 24
    strategy: str = "softmax-topk"
    robustness_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=1e-2, epochs=4))
    fed: FedConfig = field(default_factory=FedConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self) -> str:
        return hashlib.blake2b(json.dumps(self.to_dict(), sort_keys=True).encode(), digest_size=16).hexdigest()

    def with_overrides(self, **sections) -> "ExperimentConfig":
        return from_dict(_merge(self.to_dict(), sections))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        return _coerce(next(a for a in args if a is not type(None)), value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        (inner, *_) = typing.get_args(tp)
        return tuple(_coerce(inner, v, f"{path}[{i}]") for i, v in enumerate(value))
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp in (int, str, bool) and type(value) is tp:
        return value
    raise ConfigError(f"{path}: expected {getattr(tp, '__name__', tp)}, got {value!r}")


def _build(cls, data: dict, path: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{path}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    return _build(ExperimentConfig, data, "config")


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except ValueError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from e
    return from_dict(data)


__all__ = ["DataConfig", "EvalConfig", "ExperimentConfig", "MoEConfig", "from_dict", "load_config"]
