"""Power trace ingestion and energy accounting.

Energy is integrated with the trapezoid rule over a run's
``[submit, last_token]`` window, which is also the throughput window, so
``MJ/Mtok == mean_watts / tokens_per_s`` by construction.  One joule per
token is one megajoule per million tokens.
"""

from __future__ import annotations

import bisect
import csv
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Sequence

from .errors import ValidationError

TRACE_HEADER = ("timestamp_utc_ms", "watts")
DEFAULT_MAX_SKEW_S = 0.5


class EnergyMode(str, Enum):
    TRACE_INTEGRATED = "trace_integrated"
    CONSTANT_POWER = "constant_power"


@dataclass(frozen=True)
class PowerTrace:
    """Power samples; ``t_s`` are UTC epoch seconds, strictly increasing."""

    t_s: tuple[float, ...]
    watts: tuple[float, ...]
    source: str = "unknown"

    def __post_init__(self) -> None:
        object.__setattr__(self, "t_s", tuple(float(t) for t in self.t_s))
        object.__setattr__(self, "watts", tuple(float(w) for w in self.watts))
        if len(self.t_s) != len(self.watts):
            raise ValidationError("trace timestamps and watts differ in length")
        for a, b in zip(self.t_s, self.t_s[1:]):
            if not b > a:
                raise ValidationError(f"trace timestamps must be strictly increasing ({a} then {b})")
        for w in self.watts:
            if not (w >= 0 and math.isfinite(w)):
                raise ValidationError(f"trace has invalid power sample {w!r}")

    @classmethod
    def from_samples(cls, samples: Sequence[tuple[datetime | float, float]], source: str = "unknown") -> PowerTrace:
        ts = [t.timestamp() if isinstance(t, datetime) else float(t) for t, _ in samples]
        return cls(tuple(ts), tuple(w for _, w in samples), source)

    def __len__(self) -> int:
        return len(self.t_s)

    def scaled(self, k: float) -> PowerTrace:
        return PowerTrace(self.t_s, tuple(w * k for w in self.watts), self.source)

    def power_at(self, t: float) -> float:
        """Linear interpolation, clamped to the end samples."""
        ts = self.t_s
        if t <= ts[0]:
            return self.watts[0]
        if t >= ts[-1]:
            return self.watts[-1]
        i = bisect.bisect_right(ts, t)
        t0, t1 = ts[i - 1], ts[i]
        w0, w1 = self.watts[i - 1], self.watts[i]
        return w0 + (w1 - w0) * (t - t0) / (t1 - t0)


@dataclass(frozen=True)
class EnergyResult:
    joules: float
    window_s: float
    mean_power_w: float
    mode: EnergyMode
    extrapolated: bool = False
    idle_baseline_w: float = 0.0

    def to_dict(self) -> dict:
        return {
            "joules": self.joules,
            "window_s": self.window_s,
            "mean_power_w": self.mean_power_w,
            "mode": self.mode.value,
            "extrapolated": self.extrapolated,
            "idle_baseline_w": self.idle_baseline_w,
        }

    @classmethod
    def from_dict(cls, d: dict) -> EnergyResult:
        return cls(
            d["joules"], d["window_s"], d["mean_power_w"], EnergyMode(d["mode"]),
            d.get("extrapolated", False), d.get("idle_baseline_w", 0.0),
        )


def read_trace_csv(path: str | Path, source: str | None = None) -> PowerTrace:
    """Parse a ``timestamp_utc_ms,watts`` CSV."""
    path = Path(path)
    ts: list[float] = []
    ws: list[float] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRACE_HEADER:
            raise ValidationError(f"{path}:1: expected header {','.join(TRACE_HEADER)!r}, got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            try:
                t_ms, w = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                raise ValidationError(f"{path}:{lineno}: bad sample {row!r}") from None
            ts.append(t_ms / 1000)
            ws.append(w)
    try:
        return PowerTrace(tuple(ts), tuple(ws), source or path.name)
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


def write_trace_csv(trace: PowerTrace, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for t, p in zip(trace.t_s, trace.watts):
            w.writerow([repr(t * 1000), repr(p)])


def integrate(
    trace: PowerTrace,
    window: tuple[float, float],
    *,
    extrapolate: bool = False,
    idle_baseline_w: float = 0.0,
) -> EnergyResult:
    """Trapezoidal energy over ``window`` (epoch seconds).

    Window edges are linearly interpolated.  If the trace does not cover the
    window, raise unless ``extrapolate`` is set, in which case the uncovered
    part uses the nearest sample and the result is flagged.

    ``idle_baseline_w`` subtracts a constant idle draw (marginal energy).
    The default is device-total energy.
    """
    t0, t1 = float(window[0]), float(window[1])
    if not t0 < t1:
        raise ValidationError(f"energy window must have t0 < t1, got [{t0}, {t1}]")
    if len(trace) == 0:
        raise ValidationError("cannot integrate an empty power trace")
    covered = trace.t_s[0] <= t0 and trace.t_s[-1] >= t1
    if not covered and not extrapolate:
        raise ValidationError(
            f"window [{t0:.3f}, {t1:.3f}] outside trace coverage [{trace.t_s[0]:.3f}, {trace.t_s[-1]:.3f}]"
        )

    ts = trace.t_s
    lo = bisect.bisect_right(ts, t0)
    hi = bisect.bisect_left(ts, t1)
    knots = [t0, *ts[lo:hi], t1]
    joules = 0.0
    prev_t, prev_w = knots[0], trace.power_at(knots[0])
    for t in knots[1:]:
        w = trace.power_at(t)
        joules += (t - prev_t) * (prev_w + w) / 2
        prev_t, prev_w = t, w

    window_s = t1 - t0
    joules -= idle_baseline_w * window_s
    return EnergyResult(
        joules=joules,
        window_s=window_s,
        mean_power_w=joules / window_s,
        mode=EnergyMode.TRACE_INTEGRATED,
        extrapolated=not covered,
        idle_baseline_w=idle_baseline_w,
    )


def constant_power(watts: float, window_s: float) -> EnergyResult:
    """Energy for an operator-entered mean wattage held over ``window_s``."""
    if watts < 0:
        raise ValidationError("constant power must be >= 0")
    if not window_s > 0:
        raise ValidationError("energy window must be > 0 s")
    return EnergyResult(watts * window_s, window_s, watts, EnergyMode.CONSTANT_POWER)


def energy_per_mtok(energy: EnergyResult, tokens: int) -> float:
    if tokens < 1:
        raise ValidationError("tokens must be >= 1")
    return energy.joules / tokens


def implied_power_w(throughput_tps: float, mj_per_mtok: float) -> float:
    """Mean watts implied by a published (tok/s, MJ/Mtok) pair."""
    if not (throughput_tps > 0 and mj_per_mtok > 0):
        raise ValidationError("throughput and MJ/Mtok must both be > 0")
    return throughput_tps * mj_per_mtok


def utc_seconds(dt: datetime) -> float:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def run_window_utc(wall_start_utc: datetime, elapsed_s: float) -> tuple[float, float]:
    t0 = utc_seconds(wall_start_utc)
    return t0, t0 + elapsed_s


def energy_for_window(
    trace: PowerTrace,
    window: tuple[float, float],
    *,
    max_skew_s: float = DEFAULT_MAX_SKEW_S,
    idle_baseline_w: float = 0.0,
) -> EnergyResult:
    """Integrate a run window, tolerating meter clock skew up to ``max_skew_s``.

    A window overhanging the trace by no more than ``max_skew_s`` is
    integrated with edge extrapolation and flagged; anything further raises.
    """
    overhang = max(trace.t_s[0] - window[0], window[1] - trace.t_s[-1], 0.0) if len(trace) else math.inf
    if overhang > max_skew_s:
        raise ValidationError(
            f"run window overhangs power trace by {overhang:.3f} s (max tolerated skew {max_skew_s} s)"
        )
    return integrate(trace, window, extrapolate=overhang > 0, idle_baseline_w=idle_baseline_w)
