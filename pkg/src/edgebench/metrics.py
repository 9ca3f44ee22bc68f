"""Composite metrics and Pareto trade-off analysis."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence, TypeVar

from .errors import ValidationError

P = TypeVar("P")

MAX = "max"
MIN = "min"


@dataclass(frozen=True)
class MetricVector:
    config_key: tuple[str, str, str]
    throughput_tps: float
    ttft_s: float | None
    volume_m3: float
    mj_per_mtok: float | None = None
    power_w: float | None = None
    tps_per_m3: float | None = None

    def __post_init__(self) -> None:
        if self.tps_per_m3 is None and self.volume_m3 > 0:
            object.__setattr__(self, "tps_per_m3", throughput_density(self.throughput_tps, self.volume_m3))

    @property
    def config_id(self) -> str:
        return self.config_key[0]

    @property
    def model_id(self) -> str:
        return self.config_key[1]


def throughput_density(throughput_tps: float, volume_m3: float) -> float:
    """Tokens per second per cubic metre of device."""
    if not volume_m3 > 0:
        raise ValidationError("volume_m3 must be > 0")
    return throughput_tps / volume_m3


def efficiency_gain(baseline_mj: float, accel_mj: float) -> float:
    """How many times less energy per token the accelerated config uses."""
    if not (baseline_mj > 0 and accel_mj > 0):
        raise ValidationError("energy values must be > 0")
    return baseline_mj / accel_mj


Objective = tuple[str, str]


def _value(point: Any, name: str) -> Any:
    if isinstance(point, Mapping):
        return point.get(name)
    return getattr(point, name, None)


def _oriented(points: Sequence[Any], objectives: Sequence[Objective]) -> list[tuple[float, ...]]:
    if not objectives:
        raise ValidationError("at least one objective is required")
    signs = []
    for name, direction in objectives:
        if direction not in (MAX, MIN):
            raise ValidationError(f"objective {name!r}: direction must be 'max' or 'min', got {direction!r}")
        signs.append(1.0 if direction == MAX else -1.0)
    vectors = []
    for i, p in enumerate(points):
        row = []
        for (name, _), sign in zip(objectives, signs):
            v = _value(p, name)
            if v is None or (isinstance(v, float) and math.isnan(v)):
                raise ValidationError(f"point {i} has no value for objective {name!r}")
            row.append(sign * float(v))
        vectors.append(tuple(row))
    return vectors


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    """``a`` dominates ``b`` in an all-maximise space."""
    strictly = False
    for x, y in zip(a, b):
        if x < y:
            return False
        if x > y:
            strictly = True
    return strictly


def pareto_frontier(points: Sequence[P], objectives: Sequence[Objective]) -> list[P]:
    """Non-dominated subset of ``points``, in input order.

    ``objectives`` is a sequence of ``(field, "max" | "min")``.  Points equal
    on every objective do not dominate each other, so ties are all kept.
    """
    vectors = _oriented(points, objectives)
    # Any dominator of p sorts lexicographically before p, so p only needs
    # checking against frontier members already accepted.
    order = sorted(range(len(points)), key=lambda i: vectors[i], reverse=True)
    kept: list[int] = []
    for i in order:
        v = vectors[i]
        if not any(dominates(vectors[j], v) for j in kept):
            kept.append(i)
    keep = set(kept)
    return [p for i, p in enumerate(points) if i in keep]


def split_missing(points: Iterable[P], objectives: Sequence[Objective]) -> tuple[list[P], list[P]]:
    """Separate points lacking any objective value (never imputed)."""
    usable, missing = [], []
    for p in points:
        if all(_value(p, name) is not None for name, _ in objectives):
            usable.append(p)
        else:
            missing.append(p)
    return usable, missing
