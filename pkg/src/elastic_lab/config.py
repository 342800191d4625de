"""Run configuration: flat key/value YAML files, CLI overrides, model presets."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import engine as E
from .clock import ClockMode, ClockSpec
from .data import CsvSource, SyntheticSource
from .selector import Strategy


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    model: str = "default"
    dataset: str = "synthetic"  # "synthetic" or a CSV path
    num_classes: int = 4
    per_class: int = 200
    feature_dim: int = 64
    spread: float = 1.0
    test_fraction: float = 0.2
    epochs: int = 12
    batch_size: int = 4
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: str = "cosine"  # or "constant"
    rho: float = 0.5
    interval: int = 3
    probe_batch_size: int = 4
    t_q: int | None = 1000
    reserve_overhead: bool = True
    reprofile_every_epoch: bool = False
    clock_mode: str = "synthetic"
    clock_rate_conv: float = 16.0
    clock_rate_dense: float = 4.0
    clock_rate_bn: float = 2.0
    clock_rate_elementwise: float = 2.0
    clock_overhead_ns: int = 500
    eval_batch_size: int = 256
    seed: int = 0
    strategy: str = "elastic"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 < self.rho <= 1:
            raise ConfigError("rho must lie in (0, 1]")
        if self.interval < 1:
            raise ConfigError("interval must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1 or self.probe_batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.t_q is not None and self.t_q < 1:
            raise ConfigError("t_q must be >= 1")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        try:
            Strategy(self.strategy)
            ClockMode(self.clock_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def strategy_enum(self) -> Strategy:
        return Strategy(self.strategy)

    def clock(self) -> ClockSpec:
        return ClockSpec(
            mode=ClockMode(self.clock_mode),
            rates={"conv": self.clock_rate_conv, "dense": self.clock_rate_dense,
                   "bn": self.clock_rate_bn, "elementwise": self.clock_rate_elementwise},
            overhead_ns=self.clock_overhead_ns,
        )

    def data_source(self):
        if self.dataset == "synthetic":
            return SyntheticSource(self.num_classes, self.per_class, self.feature_dim,
                                   self.spread, self.seed, self.test_fraction)
        return CsvSource(self.dataset, self.num_classes, self.seed, self.test_fraction)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **overrides) -> "TrainConfig":
        return from_mapping({**self.to_dict(), **overrides})


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name: str, value):
    if value is None:
        return None
    default = _FIELDS[name].default
    if isinstance(default, bool):
        if isinstance(value, str):
            return value.strip().lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(default, int) or name == "t_q":
        if isinstance(value, str) and value.strip().lower() in ("none", "exact", "null"):
            return None
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


def from_mapping(values: dict) -> TrainConfig:
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**{k: _coerce(k, v) for k, v in values.items()})


def load_config(path: str | Path | None = None, **overrides) -> TrainConfig:
    """Read a flat YAML mapping; keyword overrides (e.g. CLI flags) win."""
    values: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: expected a flat key/value mapping")
        values.update(loaded)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return from_mapping(values)


def default_model(num_classes: int, feature_dim: int) -> tuple[list[E.LayerSpec], tuple[int, ...]]:
    side = math.isqrt(feature_dim)
    if side * side != feature_dim or side % 4:
        raise ConfigError(f"default model needs a square image input with side divisible by 4, "
                          f"got feature_dim={feature_dim}")
    flat = 16 * (side // 4) ** 2
    layers = [
        E.conv2d(1, 8, 3, padding=1), E.batchnorm(8), E.relu(), E.pool2d(2),
        E.conv2d(8, 16, 3, padding=1), E.batchnorm(16), E.relu(), E.pool2d(2),
        E.flatten(), E.dense(flat, 64), E.relu(), E.dense(64, num_classes), E.softmax_ce(),
    ]
    return layers, (1, side, side)


def model_spec(name: str, num_classes: int, feature_dim: int
               ) -> tuple[list[E.LayerSpec], tuple[int, ...]]:
    """Resolve a preset name or a JSON file ``{"input_shape": [...], "layers": [...]}``."""
    if name == "default":
        return default_model(num_classes, feature_dim)
    if name == "mlp":
        return ([E.dense(feature_dim, 32), E.batchnorm(32), E.relu(), E.dense(32, num_classes),
                 E.softmax_ce()], (feature_dim,))
    if name == "linear":
        return [E.dense(feature_dim, num_classes), E.softmax_ce()], (feature_dim,)
    path = Path(name)
    if not path.exists():
        raise ConfigError(f"unknown model {name!r}")
    doc = json.loads(path.read_text())
    return [E.LayerSpec.from_dict(d) for d in doc["layers"]], tuple(doc["input_shape"])
