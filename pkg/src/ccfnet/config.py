"""Run configuration: nested dataclasses loaded from JSON.

Every key is optional and defaults to the value set on the dataclass;
unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .codec import GridSpec
from .loss import LossWeights
from .network import EncoderConfig, MSCConfig
from .synth import AugmentPolicy, SynthConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    folds: int = 4
    split_seed: int = 0
    train_frac: float = 1.0

    def validate(self) -> "RunConfig":
        try:
            self.train.validate()
            self.synth.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.synth.image_size != self.train.grid.image_h or self.synth.image_size != self.train.grid.image_w:
            raise ConfigError("synth.image_size must match train.grid image size")
        if self.synth.grid_stride != self.train.grid.stride:
            raise ConfigError("synth.grid_stride must match train.grid.stride")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not 0 < self.train_frac <= 1:
            raise ConfigError("train_frac must lie in (0, 1]")
        return self


def _dataclass_type(tp) -> Optional[type]:
    if dataclasses.is_dataclass(tp):
        return tp
    for arg in typing.get_args(tp):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_dict(cls, data: Optional[dict], path: str = ""):
    """Build dataclass ``cls`` from a (possibly partial) mapping."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config key(s) {sorted(unknown)} in {path or cls.__name__}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        sub = _dataclass_type(hints[name])
        where = f"{path}.{name}" if path else name
        if sub is not None and value is not None:
            kwargs[name] = from_dict(sub, value, where)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def load_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(RunConfig, data).validate()


__all__ = [
    "AugmentPolicy",
    "ConfigError",
    "EncoderConfig",
    "GridSpec",
    "LossWeights",
    "MSCConfig",
    "RunConfig",
    "SynthConfig",
    "TrainConfig",
    "from_dict",
    "load_config",
    "to_dict",
]
