"""Exit-criteria checks, shared by ``edgebench validate-fixture`` and the test suite.

Each check returns a :class:`CheckResult`; nothing here raises on a failed
criterion.  Oracles used for comparison (brute-force dominance, Riemann sums)
are written independently of the code they check.
"""

from __future__ import annotations

import math
import random
import statistics
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable

import numpy as np

from .adapters import RuntimeEndpoint, TokenEvent
from .bench import BenchmarkConfig, RunRecord, Target, aggregate_runs, run_suite
from .catalog import Catalog, DeviceProfile, ModelSpec, load_catalog
from .energy import PowerTrace, constant_power, energy_per_mtok, implied_power_w, integrate
from .metrics import efficiency_gain, pareto_frontier, throughput_density
from .mock_server import MockProfile, serve
from .report import GOLDEN_RENDER, GoldenFixture, load_golden, normalize_whitespace, render_table, save_golden
from .store import ResultStore


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    details: list[str] = field(default_factory=list)
    elapsed_s: float = 0.0
    budget_s: float | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        budget = f" (budget {self.budget_s:g}s)" if self.budget_s else ""
        return f"[{status}] {self.number}. {self.name}: {self.elapsed_s:.2f}s{budget}"


class _Checker:
    def __init__(self, number: int, name: str, budget_s: float | None) -> None:
        self.result = CheckResult(number, name, True, budget_s=budget_s)

    def expect(self, ok: bool, msg: str) -> None:
        self.result.details.append(("ok   " if ok else "FAIL ") + msg)
        if not ok:
            self.result.passed = False

    def __enter__(self) -> _Checker:
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        r = self.result
        if exc is not None:
            r.passed = False
            r.details.append(f"FAIL raised {exc_type.__name__}: {exc}")
        r.elapsed_s = time.perf_counter() - self._t0
        if r.budget_s is not None and r.elapsed_s >= r.budget_s:
            r.passed = False
            r.details.append(f"FAIL runtime {r.elapsed_s:.2f}s exceeds {r.budget_s}s")
        return True


# narrative wall-power figures per device (watts, low..high)
NARRATIVE_POWER_W = {
    "m5stack-llm": (1.4, 1.4),
    "rpi5": (11.0, 11.0),
    "rpi5-hat": (6.0, 6.0),
    "jetson-orin-nano": (12.0, 13.0),
}
POWER_TOLERANCE = 0.25


def check_implied_power(fixture: GoldenFixture | None = None) -> CheckResult:
    fixture = fixture or load_golden()
    with _Checker(1, "implied power on fixture", budget_s=1.0) as c:
        per_device: dict[str, list[float]] = {}
        for cell in fixture.supported():
            p = implied_power_w(cell.throughput_tps, cell.mj_per_mtok)
            c.expect(math.isfinite(p) and p > 0, f"{cell.config_id}/{cell.model_id} implied {p:.3f} W")
            per_device.setdefault(cell.device_id, []).append(p)
        c.expect(set(per_device) == set(NARRATIVE_POWER_W), f"devices covered: {sorted(per_device)}")
        for device, powers in per_device.items():
            lo, hi = NARRATIVE_POWER_W[device]
            med = statistics.median(powers)
            band = (lo * (1 - POWER_TOLERANCE), hi * (1 + POWER_TOLERANCE))
            c.expect(band[0] <= med <= band[1],
                     f"{device}: median {med:.2f} W within [{band[0]:.2f}, {band[1]:.2f}] W")
    return c.result


GAIN_EXPECTATIONS = (
    # (label, model, baseline config, accelerated config, expected, tolerance)
    ("DeepSeek RPi5 -> RPi5+HAT", "deepseek-r1-1.5b", "rpi5", "rpi5-hat", 9.58, 0.05),
    ("qwen-instruct RPi5 -> RPi5+HAT", "qwen2.5-instruct-1.5b", "rpi5", "rpi5-hat", 40.13, 0.2),
    ("DeepSeek Jetson CPU -> GPU", "deepseek-r1-1.5b", "jetson-cpu", "jetson-gpu", 1.82, 0.01),
    ("qwen2.5-1.5B Jetson CPU -> GPU", "qwen2.5-1.5b", "jetson-cpu", "jetson-gpu", 1.24, 0.01),
)


def check_efficiency_gains(fixture: GoldenFixture | None = None) -> CheckResult:
    fixture = fixture or load_golden()
    with _Checker(2, "efficiency gains", budget_s=1.0) as c:
        for label, model, base, accel, expected, tol in GAIN_EXPECTATIONS:
            g = efficiency_gain(fixture.cell(base, model).mj_per_mtok, fixture.cell(accel, model).mj_per_mtok)
            c.expect(abs(g - expected) <= tol, f"{label}: {g:.4f}x, expected {expected} +/- {tol}")
    return c.result


EXPECTED_VOLUMES_CM3 = {"m5stack-llm": 38, "rpi5": 81, "rpi5-hat": 95, "jetson-orin-nano": 166}


def check_throughput_density(fixture: GoldenFixture | None = None, catalog: Catalog | None = None) -> CheckResult:
    fixture = fixture or load_golden()
    catalog = catalog or load_catalog()
    with _Checker(3, "throughput density and volumes", budget_s=None) as c:
        cell = fixture.cell("m5stack-llm", "llama3.2-1b")
        dens = throughput_density(cell.throughput_tps, catalog.device("m5stack-llm").volume_m3)
        c.expect(dens >= 90_000, f"m5stack/llama3.2-1b density {dens:.1f} >= 90000 Tps/m3")
        c.expect(abs(dens - 90_746) <= 0.01 * 90_746, f"density {dens:.1f} = 90746 +/- 1%")
        for device, expected in EXPECTED_VOLUMES_CM3.items():
            cm3 = catalog.device(device).volume_cm3
            c.expect(abs(round(cm3) - expected) <= 1, f"{device}: {cm3:.2f} cm3 renders {round(cm3)} (expect {expected})")
    return c.result


def brute_force_frontier(values: np.ndarray, maximize: np.ndarray) -> np.ndarray:
    """Boolean mask of non-dominated rows by full pairwise comparison."""
    v = np.where(maximize, values, -values)
    ge = (v[:, None, :] >= v[None, :, :]).all(axis=2)
    gt = (v[:, None, :] > v[None, :, :]).any(axis=2)
    dominated_by = ge & gt  # [i, j]: i dominates j
    return ~dominated_by.any(axis=0)


def check_pareto(fixture: GoldenFixture | None = None, instances: int = 1000, seed: int = 20240601) -> CheckResult:
    fixture = fixture or load_golden()
    with _Checker(4, "pareto frontier vs brute force", budget_s=10.0) as c:
        column = [x for x in fixture.supported() if x.model_id == "deepseek-r1-1.5b"]
        front = pareto_frontier(column, [("throughput_tps", "max"), ("mj_per_mtok", "min")])
        ids = {x.config_id for x in front}
        c.expect(len(column) == 5, f"DeepSeek column has {len(column)} configurations")
        c.expect(ids == {"m5stack-llm", "jetson-gpu"}, f"DeepSeek frontier {sorted(ids)}")

        rng = np.random.default_rng(seed)
        mismatches = 0
        for _ in range(instances):
            n = int(rng.integers(1, 201))
            d = int(rng.integers(1, 5))
            # small integer grid forces ties and duplicate points
            vals = rng.integers(0, int(rng.choice([3, 10, 1000])), size=(n, d)).astype(float)
            maximize = rng.random(d) < 0.5
            objectives = [(f"f{k}", "max" if maximize[k] else "min") for k in range(d)]
            points = [{f"f{k}": vals[i, k] for k in range(d)} | {"_i": i} for i in range(n)]
            got = [p["_i"] for p in pareto_frontier(points, objectives)]
            want = list(np.flatnonzero(brute_force_frontier(vals, maximize)))
            if got != want:
                mismatches += 1
        c.expect(mismatches == 0, f"{mismatches} mismatches over {instances} random instances (n <= 200)")
    return c.result


MOCK_TTFT_BAND_S = (0.75, 0.90)
MOCK_EXPECTED_TPS = 100 / 20.6


def check_mock_end_to_end(runs: int = 5, tokens: int = 100) -> CheckResult:
    profile = MockProfile("mock-llm", ttft_ms=800, tokens_per_s=5, first_request_load_ms=2000, jitter_pct=0)
    with _Checker(5, "mock end-to-end measurement", budget_s=180.0) as c:
        catalog = Catalog(
            (DeviceProfile("desk", "desk mock", 100, 100, 10),),
            (ModelSpec("mock-llm", "mock", 1.0, runtime_model_ids={"mock": "mock-llm"}),),
        )
        config = BenchmarkConfig(runs=runs, max_new_tokens=tokens, warmup_runs=1,
                                 warmup_max_new_tokens=1, cooldown_s=0)
        records: list[RunRecord] = []
        with serve([profile]) as server:
            target = Target("desk-mock", "desk", RuntimeEndpoint("mock", server.url))
            [agg] = run_suite(catalog, [target], ["mock-llm"], config, on_run=records.append)
        c.expect(agg.n == runs, f"n={agg.n} ok runs")
        ok = [r for r in records if r.ok]
        if ok:
            lo, hi = MOCK_TTFT_BAND_S
            c.expect(lo <= agg.ttft_s.mean <= hi, f"mean TTFT {agg.ttft_s.mean:.4f}s in [{lo}, {hi}]")
            c.expect(lo <= ok[0].ttft_s <= hi, f"first timed run TTFT {ok[0].ttft_s:.4f}s (load absorbed by warmup)")
            mean = agg.throughput_tps.mean
            c.expect(abs(mean - MOCK_EXPECTED_TPS) <= 0.05 * MOCK_EXPECTED_TPS,
                     f"mean throughput {mean:.4f} tok/s within 5% of {MOCK_EXPECTED_TPS:.4f}")
            cv = agg.throughput_tps.stdev / mean
            c.expect(cv < 0.02, f"stdev/mean {cv:.5f} < 0.02")
            c.expect(all(r.token_count == tokens for r in ok), f"every run produced {tokens} tokens")
    return c.result


def riemann_energy(power: Callable[[float], float], t0: float, t1: float, step: float = 1e-3) -> float:
    """Midpoint Riemann sum of a power function."""
    n = int(round((t1 - t0) / step))
    return sum(power(t0 + (k + 0.5) * step) for k in range(n)) * step


def check_energy(cases: int = 1000, seed: int = 7) -> CheckResult:
    with _Checker(6, "energy integration", budget_s=None) as c:
        flat = PowerTrace((0.0, 10.0), (10.0, 10.0))
        e = integrate(flat, (0.0, 10.0)).joules
        c.expect(e == 100.0, f"constant 10 W x 10 s = {e!r} J")
        ramp = PowerTrace((0.0, 10.0), (5.0, 15.0))
        e = integrate(ramp, (0.0, 10.0)).joules
        c.expect(abs(e - 100.0) <= 1e-6, f"5->15 W ramp over 10 s = {e!r} J")

        # 5 W until t=5, 15 W after, sampled every 100 ms: the step falls
        # between the 4.9 s and 5.0 s samples
        ts = tuple(k / 10 for k in range(101))
        step_trace = PowerTrace(ts, tuple(5.0 if t < 5.0 else 15.0 for t in ts))
        e = integrate(step_trace, (0.0, 10.0)).joules
        oracle = riemann_energy(lambda t: 5.0 if t < 5.0 else 15.0, 0.0, 10.0)
        c.expect(abs(e - oracle) <= 0.01 * oracle, f"step trace {e:.4f} J vs 1 ms Riemann {oracle:.4f} J")

        mj = energy_per_mtok(constant_power(10.0, 10.0), 50)
        c.expect(mj == 2.0, f"100 J / 50 tokens = {mj!r} MJ/Mtok")

        rng = random.Random(seed)
        bad = 0
        for _ in range(cases):
            p = rng.uniform(0.1, 50)
            rate = rng.uniform(0.05, 50)
            k = rng.uniform(0.01, 100)
            tokens = rng.randint(1, 500)
            base = energy_per_mtok(constant_power(p, tokens / rate), tokens)
            scaled = energy_per_mtok(constant_power(k * p, tokens / (k * rate)), tokens)
            if not math.isclose(base, scaled, rel_tol=1e-9):
                bad += 1
        c.expect(bad == 0, f"scale invariance violated in {bad}/{cases} cases")
    return c.result


def synthetic_runs(seed: int = 3) -> list[RunRecord]:
    """Deterministic RunRecords with full event timelines (no network)."""
    rng = random.Random(seed)
    base = datetime(2025, 1, 1, tzinfo=timezone.utc)
    runs = []
    for config_id, device_id in (("rpi5", "rpi5"), ("jetson-gpu", "jetson-orin-nano")):
        for model_id in ("deepseek-r1-1.5b", "llama3.2-1b"):
            for i in range(5):
                submit = rng.randrange(10**9, 10**12)
                t = submit + rng.randrange(10**8, 3 * 10**9)
                events = []
                n_tok = rng.randint(90, 100)
                for k in range(n_tok):
                    events.append(TokenEvent(t, f"tok{k}"))
                    t += rng.randrange(5 * 10**7, 3 * 10**8)
                events.append(TokenEvent(t, "", True))
                status = "ok" if (i, model_id) != (3, "llama3.2-1b") else "failed"
                run = RunRecord(
                    device_id=device_id, model_id=model_id, runtime_kind="ollama_native", config_id=config_id,
                    submit_monotonic_ns=submit, first_token_ns=events[0].recv_monotonic_ns,
                    last_token_ns=events[-2].recv_monotonic_ns,
                    wall_start_utc=base + timedelta(seconds=rng.randrange(10**6)),
                    token_count=n_tok, events=events, status=status,
                    failure_reason=None if status == "ok" else "transport error: synthetic drop", run_index=i,
                )
                if i % 2 == 0:
                    run.energy = constant_power(rng.uniform(1, 12), run.elapsed_s)
                runs.append(run)
    return runs


def check_roundtrip_render(workdir: Path | None = None) -> CheckResult:
    with _Checker(7, "round-trip and re-render", budget_s=None) as c, tempfile.TemporaryDirectory() as tmp:
        store = ResultStore(workdir or Path(tmp)).init()
        save_golden(load_golden(), store.fixtures_dir / "table3.csv")
        reloaded = load_golden(store.fixtures_dir / "table3.csv")
        rendered = render_table(reloaded, catalog=load_catalog())
        expected = GOLDEN_RENDER.read_text(encoding="utf-8")
        c.expect(normalize_whitespace(rendered) == normalize_whitespace(expected),
                 "persisted fixture renders identically to the checked-in table")
        c.expect(rendered.count("--") >= 14, "unsupported cells render as --")

        runs = synthetic_runs()
        store.persist_runs(runs)
        store.save_aggregates(aggregate_runs(runs))
        stored = {a.key: a.to_dict() for a in store.load_aggregates()}
        recomputed = {a.key: a.to_dict() for a in store.recompute_aggregates()}
        c.expect(stored == recomputed, f"recomputed aggregates equal stored ({len(stored)} configurations)")
        loaded = store.load_runs()
        c.expect([r.to_dict() for r in loaded] == [r.to_dict() for r in runs], "runs round-trip losslessly")
    return c.result


FIXTURE_CHECKS = (
    check_implied_power,
    check_efficiency_gains,
    check_throughput_density,
    check_pareto,
    check_energy,
    check_roundtrip_render,
)


def run_checks(include_mock: bool = False) -> list[CheckResult]:
    results = [check() for check in FIXTURE_CHECKS]
    if include_mock:
        results.append(check_mock_end_to_end())
    return sorted(results, key=lambda r: r.number)
