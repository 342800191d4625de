"""Op timing: a deterministic work-count clock and a wall clock for sanity runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

DEFAULT_RATES = {"conv": 16.0, "dense": 4.0, "bn": 2.0, "elementwise": 2.0}
DEFAULT_OVERHEAD_NS = 500


class ClockMode(str, Enum):
    SYNTHETIC = "synthetic"
    WALL = "wall"


@dataclass(frozen=True)
class ClockSpec:
    """Per-op-class throughput in flops per nanosecond plus a fixed per-op cost."""

    mode: ClockMode = ClockMode.SYNTHETIC
    rates: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_RATES))
    overhead_ns: int = DEFAULT_OVERHEAD_NS

    def __post_init__(self):
        object.__setattr__(self, "mode", ClockMode(self.mode))
        for name, rate in self.rates.items():
            if not rate > 0:
                raise ValueError(f"rate for {name!r} must be positive, got {rate}")
        if self.overhead_ns < 0:
            raise ValueError("overhead_ns must be non-negative")

    def __hash__(self):
        return hash((self.mode, tuple(sorted(self.rates.items())), self.overhead_ns))


@dataclass(frozen=True)
class OpTiming:
    layer: int
    kind: str
    duration: int


def time_op(clock: ClockSpec, rate_class: str, work: int, measured_ns: int | None = None) -> int:
    """Duration in integer nanoseconds of one op with ``work`` flops.

    Synthetic mode is ``floor(work / rate) + overhead``; wall mode returns the
    measured duration.
    """
    if work < 0:
        raise ValueError("work must be non-negative")
    if clock.mode is ClockMode.WALL:
        return int(measured_ns or 0)
    rate = clock.rates[rate_class]
    return math.floor(work / rate) + clock.overhead_ns


def op_timings(clock: ClockSpec, records: Iterable) -> list[OpTiming]:
    return [OpTiming(r.layer, r.kind.value, time_op(clock, r.rate_class, r.work, r.wall_ns))
            for r in records]


def total_time(clock: ClockSpec, records: Iterable) -> int:
    return sum(time_op(clock, r.rate_class, r.work, r.wall_ns) for r in records)
