"""Run configuration: one JSON document, every field optional with a default."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .distill import TrainConfig, config_to_dict
from .model import ModelConfig
from .qlinear import QuantPolicy


class ConfigError(ValueError):
    pass


@dataclass
class BenchConfig:
    n_tokens: int = 128
    batch: int = 1
    repeats: int = 5
    warmup: int = 1
    reference_n_tokens: int = 2048

    def validate(self):
        if self.repeats < 3 or self.warmup < 1:
            raise ValueError("bench needs repeats >= 3 and warmup >= 1")
        if self.n_tokens < 1 or self.batch < 1 or self.reference_n_tokens < 1:
            raise ValueError("bench sizes must be >= 1")


@dataclass
class RunConfig:
    """``train.seed`` drives teacher init, data and shuffling."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def validate(self):
        try:
            self.model.validate()
            self.train.validate()
            self.bench.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return {"model": self.model.to_dict(),
                "train": config_to_dict(self.train), "bench": dataclasses.asdict(self.bench)}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in data.items():
        nested = _NESTED.get((cls, key))
        if nested is not None:
            kwargs[key] = _build(nested, value, f"{where}.{key}")
            continue
        default = known[key].default
        if default is not dataclasses.MISSING and default is not None:
            expected = type(default)
            ok = isinstance(value, expected) and not (expected is int and isinstance(value, bool))
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                value, ok = float(value), True
            if not ok:
                raise ConfigError(f"{where}.{key}: expected {expected.__name__}, got {value!r}")
        elif key in ("include", "exclude"):
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise ConfigError(f"{where}.{key}: expected a list of strings")
        kwargs[key] = value
    return cls(**kwargs)


_NESTED = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "bench"): BenchConfig,
    (TrainConfig, "policy"): QuantPolicy,
}


def parse_config(data) -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data)
