"""Measurement protocol: warmup, n timed streaming runs, aggregation.

Timing uses ``time.monotonic_ns``.  Throughput is tokens over the full
``submit -> last token`` span, TTFT included; a generation-phase rate
(first to last token) is kept alongside for diagnostics.
"""

from __future__ import annotations

import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import httpx

from .adapters import (
    CONNECT_TIMEOUT_S,
    INTER_CHUNK_TIMEOUT_S,
    InferenceRequest,
    RuntimeEndpoint,
    TokenEvent,
    chat_stream,
    health_check,
    stream_timeout,
)
from .catalog import BUNDLED_CATALOG, Catalog, ModelSpec, RuntimeKind, load_toml, parse_catalog
from .energy import EnergyResult, energy_per_mtok
from .errors import EdgeBenchError, ModelNotFoundError, TransportError, UnsupportedRuntimeError, ValidationError

log = logging.getLogger(__name__)

DEFAULT_PROMPT = "Explain why the sky is blue in two or more paragraphs."

OK = "ok"
FAILED = "failed"
UNSUPPORTED = "unsupported"


@dataclass(frozen=True)
class BenchmarkConfig:
    prompt: str = DEFAULT_PROMPT
    max_new_tokens: int = 100
    runs: int = 5
    warmup_runs: int = 1
    decode_params: Mapping[str, Any] = field(default_factory=dict)
    # None means warm up with the full max_new_tokens
    warmup_max_new_tokens: int | None = None
    cooldown_s: float = 2.0
    retry_failed: bool = True
    connect_timeout_s: float = CONNECT_TIMEOUT_S
    inter_chunk_timeout_s: float = INTER_CHUNK_TIMEOUT_S

    def __post_init__(self) -> None:
        if self.runs < 1:
            raise ValidationError("runs must be >= 1")
        if self.max_new_tokens < 1:
            raise ValidationError("max_new_tokens must be >= 1")
        if self.warmup_runs < 0:
            raise ValidationError("warmup_runs must be >= 0")
        if self.warmup_max_new_tokens is not None and self.warmup_max_new_tokens < 1:
            raise ValidationError("warmup_max_new_tokens must be >= 1")
        if self.cooldown_s < 0:
            raise ValidationError("cooldown_s must be >= 0")
        object.__setattr__(self, "decode_params", dict(self.decode_params))


@dataclass(frozen=True)
class Target:
    """One hardware configuration to benchmark.

    ``config_id`` distinguishes placements on the same device (for example
    Jetson CPU vs GPU, both served by native Ollama).
    """

    config_id: str
    device_id: str
    endpoint: RuntimeEndpoint


@dataclass
class RunRecord:
    device_id: str
    model_id: str
    runtime_kind: str
    config_id: str
    submit_monotonic_ns: int
    first_token_ns: int
    last_token_ns: int
    wall_start_utc: datetime
    token_count: int
    events: list[TokenEvent] = field(default_factory=list)
    status: str = OK
    failure_reason: str | None = None
    run_index: int = 0
    energy: EnergyResult | None = None

    @property
    def ok(self) -> bool:
        return self.status == OK

    @property
    def ttft_s(self) -> float:
        return (self.first_token_ns - self.submit_monotonic_ns) * 1e-9

    @property
    def elapsed_s(self) -> float:
        return (self.last_token_ns - self.submit_monotonic_ns) * 1e-9

    @property
    def throughput_tps(self) -> float:
        return self.token_count / self.elapsed_s

    @property
    def generation_tps(self) -> float | None:
        span = (self.last_token_ns - self.first_token_ns) * 1e-9
        if self.token_count < 2 or span <= 0:
            return None
        return (self.token_count - 1) / span

    @property
    def mj_per_mtok(self) -> float | None:
        if self.energy is None or self.token_count < 1:
            return None
        return energy_per_mtok(self.energy, self.token_count)

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.config_id, self.model_id, self.runtime_kind)

    @property
    def run_id(self) -> str:
        return f"{self.config_id}|{self.model_id}|{self.wall_start_utc.isoformat()}|{self.submit_monotonic_ns}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "device_id": self.device_id,
            "model_id": self.model_id,
            "runtime_kind": self.runtime_kind,
            "config_id": self.config_id,
            "run_index": self.run_index,
            "status": self.status,
            "failure_reason": self.failure_reason,
            "submit_monotonic_ns": self.submit_monotonic_ns,
            "first_token_ns": self.first_token_ns,
            "last_token_ns": self.last_token_ns,
            "wall_start_utc": self.wall_start_utc.isoformat(),
            "token_count": self.token_count,
            "events": [e.to_dict() for e in self.events],
            "energy": self.energy.to_dict() if self.energy else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> RunRecord:
        return cls(
            device_id=d["device_id"],
            model_id=d["model_id"],
            runtime_kind=d["runtime_kind"],
            config_id=d.get("config_id", d["device_id"]),
            submit_monotonic_ns=int(d["submit_monotonic_ns"]),
            first_token_ns=int(d["first_token_ns"]),
            last_token_ns=int(d["last_token_ns"]),
            wall_start_utc=datetime.fromisoformat(d["wall_start_utc"]),
            token_count=int(d["token_count"]),
            events=[TokenEvent.from_dict(e) for e in d.get("events", [])],
            status=d.get("status", OK),
            failure_reason=d.get("failure_reason"),
            run_index=int(d.get("run_index", 0)),
            energy=EnergyResult.from_dict(d["energy"]) if d.get("energy") else None,
        )


@dataclass(frozen=True)
class Stats:
    mean: float
    stdev: float
    min: float
    max: float

    @classmethod
    def of(cls, values: Sequence[float]) -> Stats:
        if not values:
            raise ValueError("no values to summarise")
        mean = statistics.fmean(values)
        stdev = statistics.stdev(values) if len(values) > 1 else 0.0
        return cls(mean, stdev, min(values), max(values))

    def to_dict(self) -> dict[str, float]:
        return {"mean": self.mean, "stdev": self.stdev, "min": self.min, "max": self.max}

    @classmethod
    def from_dict(cls, d: Mapping[str, float] | None) -> Stats | None:
        if d is None:
            return None
        return cls(d["mean"], d["stdev"], d["min"], d["max"])


@dataclass
class AggregateResult:
    config_id: str
    device_id: str
    model_id: str
    runtime_kind: str
    n: int
    throughput_tps: Stats | None = None
    ttft_s: Stats | None = None
    energy_mj_per_mtok: Stats | None = None
    power_w: Stats | None = None
    generation_tps: Stats | None = None
    per_run_deviations: list[float] = field(default_factory=list)
    status: str = OK
    note: str = ""
    energy_mode: str | None = None
    warmup_runs: int = 1
    concurrency: int = 1

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.config_id, self.model_id, self.runtime_kind)

    @property
    def supported(self) -> bool:
        return self.status == OK and self.n > 0

    def to_dict(self) -> dict[str, Any]:
        def s(x: Stats | None) -> dict[str, float] | None:
            return x.to_dict() if x else None

        return {
            "config_id": self.config_id,
            "device_id": self.device_id,
            "model_id": self.model_id,
            "runtime_kind": self.runtime_kind,
            "n": self.n,
            "status": self.status,
            "note": self.note,
            "throughput_tps": s(self.throughput_tps),
            "ttft_s": s(self.ttft_s),
            "generation_tps": s(self.generation_tps),
            "energy_mj_per_mtok": s(self.energy_mj_per_mtok),
            "power_w": s(self.power_w),
            "energy_mode": self.energy_mode,
            "per_run_deviations": list(self.per_run_deviations),
            "warmup_runs": self.warmup_runs,
            "concurrency": self.concurrency,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> AggregateResult:
        return cls(
            config_id=d["config_id"],
            device_id=d["device_id"],
            model_id=d["model_id"],
            runtime_kind=d["runtime_kind"],
            n=int(d["n"]),
            throughput_tps=Stats.from_dict(d.get("throughput_tps")),
            ttft_s=Stats.from_dict(d.get("ttft_s")),
            energy_mj_per_mtok=Stats.from_dict(d.get("energy_mj_per_mtok")),
            power_w=Stats.from_dict(d.get("power_w")),
            generation_tps=Stats.from_dict(d.get("generation_tps")),
            per_run_deviations=list(d.get("per_run_deviations", [])),
            status=d.get("status", OK),
            note=d.get("note", ""),
            energy_mode=d.get("energy_mode"),
            warmup_runs=int(d.get("warmup_runs", 1)),
            concurrency=int(d.get("concurrency", 1)),
        )


def aggregate(
    runs: Iterable[RunRecord],
    *,
    config_id: str,
    device_id: str,
    model_id: str,
    runtime_kind: str,
    warmup_runs: int = 1,
    concurrency: int = 1,
) -> AggregateResult:
    """Summarise the ok runs of one configuration.  Failed runs never count."""
    ok = [r for r in runs if r.ok]
    agg = AggregateResult(
        config_id, device_id, model_id, runtime_kind, n=len(ok),
        warmup_runs=warmup_runs, concurrency=concurrency,
    )
    if not ok:
        agg.status = FAILED
        agg.note = "no successful runs"
        return agg
    tps = [r.throughput_tps for r in ok]
    agg.throughput_tps = Stats.of(tps)
    agg.ttft_s = Stats.of([r.ttft_s for r in ok])
    gen = [g for g in (r.generation_tps for r in ok) if g is not None]
    agg.generation_tps = Stats.of(gen) if gen else None
    agg.per_run_deviations = [t - agg.throughput_tps.mean for t in tps]
    with_energy = [r for r in ok if r.energy is not None]
    if with_energy:
        if len(with_energy) < len(ok):
            agg.note = f"energy available for {len(with_energy)}/{len(ok)} runs"
        agg.energy_mj_per_mtok = Stats.of([r.mj_per_mtok for r in with_energy])
        agg.power_w = Stats.of([r.energy.mean_power_w for r in with_energy])
        modes = sorted({r.energy.mode.value for r in with_energy})
        agg.energy_mode = "+".join(modes)
    if warmup_runs == 0:
        agg.note = "; ".join(filter(None, [agg.note, "no warmup"]))
    return agg


def aggregate_runs(runs: Iterable[RunRecord], *, warmup_runs: int = 1) -> list[AggregateResult]:
    """Group persisted runs by configuration and aggregate each group."""
    groups: dict[tuple[str, str, str], list[RunRecord]] = {}
    for r in runs:
        groups.setdefault(r.key, []).append(r)
    out = []
    for (config_id, model_id, kind), rs in groups.items():
        out.append(aggregate(
            rs, config_id=config_id, device_id=rs[0].device_id, model_id=model_id,
            runtime_kind=kind, warmup_runs=warmup_runs,
        ))
    return out


def resolve_model_name(model: ModelSpec | str, kind: RuntimeKind | str) -> str | None:
    if isinstance(model, str):
        return model
    kind = RuntimeKind(kind)
    name = model.runtime_id(kind)
    if name is None and kind is RuntimeKind.MOCK:
        name = model.runtime_id(RuntimeKind.OLLAMA_NATIVE)
    return name


def _model_id(model: ModelSpec | str) -> str:
    return model if isinstance(model, str) else model.id


def _request(model_name: str, config: BenchmarkConfig, max_new_tokens: int | None = None) -> InferenceRequest:
    return InferenceRequest(
        model_id=model_name,
        prompt=config.prompt,
        max_new_tokens=max_new_tokens or config.max_new_tokens,
        decode_params=config.decode_params,
    )


def run_once(
    endpoint: RuntimeEndpoint,
    model: ModelSpec | str,
    config: BenchmarkConfig,
    *,
    device_id: str = "",
    config_id: str | None = None,
    run_index: int = 0,
) -> RunRecord:
    """One timed streaming run.  Adapter failures come back as ``status='failed'``."""
    record = RunRecord(
        device_id=device_id,
        model_id=_model_id(model),
        runtime_kind=endpoint.kind.value,
        config_id=config_id or device_id,
        submit_monotonic_ns=0,
        first_token_ns=0,
        last_token_ns=0,
        wall_start_utc=datetime.now(timezone.utc),
        token_count=0,
        run_index=run_index,
    )
    name = resolve_model_name(model, endpoint.kind)
    if name is None:
        record.status, record.failure_reason = FAILED, f"model not available on {endpoint.kind.value}"
        return record
    request = _request(name, config)
    events: list[TokenEvent] = []
    # build the client (SSL context etc.) before the clock starts
    with httpx.Client(timeout=stream_timeout(config.connect_timeout_s, config.inter_chunk_timeout_s)) as client:
        record.wall_start_utc = datetime.now(timezone.utc)
        record.submit_monotonic_ns = time.monotonic_ns()
        try:
            completion = chat_stream(endpoint, request, events.append, client=client)
        except EdgeBenchError as exc:
            completion = None
            reason = f"{type(exc).__name__}: {exc}"
    record.events = events
    tokens = [e for e in events if not e.is_final]
    record.token_count = len(tokens)
    if tokens:
        record.first_token_ns = tokens[0].recv_monotonic_ns
        record.last_token_ns = tokens[-1].recv_monotonic_ns
    else:
        record.first_token_ns = record.last_token_ns = record.submit_monotonic_ns

    if completion is None:
        record.status, record.failure_reason = FAILED, reason
    elif not completion.transport_ok:
        record.status, record.failure_reason = FAILED, completion.error
    elif not tokens:
        record.status, record.failure_reason = FAILED, "stream produced no tokens"
    else:
        final = events[-1]
        if final.server_reported is not None and final.server_reported.eval_count != record.token_count:
            log.warning(
                "%s/%s: server eval_count=%d but %d token chunks received; using client count",
                record.config_id, record.model_id, final.server_reported.eval_count, record.token_count,
            )
    return record


def warmup(endpoint: RuntimeEndpoint, model: ModelSpec | str, config: BenchmarkConfig) -> None:
    """Issue untimed requests so weights are resident before timing starts.

    Raises :class:`ModelNotFoundError` when the runtime does not know the
    model and :class:`TransportError` on any other failure.
    """
    name = resolve_model_name(model, endpoint.kind)
    if name is None:
        raise ModelNotFoundError(_model_id(model), f"no runtime id for {endpoint.kind.value}")
    request = _request(name, config, config.warmup_max_new_tokens)
    for i in range(config.warmup_runs):
        completion = chat_stream(
            endpoint, request, lambda _e: None,
            connect_timeout_s=config.connect_timeout_s,
            inter_chunk_timeout_s=config.inter_chunk_timeout_s,
        )
        if not completion.transport_ok:
            raise TransportError(f"warmup {i + 1} failed for {name} at {endpoint.base_url}: {completion.error}")


def _benchmark_pair(
    target: Target,
    model: ModelSpec,
    config: BenchmarkConfig,
    on_run: Callable[[RunRecord], None],
    concurrency: int,
    sleep: Callable[[float], None],
) -> AggregateResult:
    kind = target.endpoint.kind.value

    def annotated(status: str, note: str) -> AggregateResult:
        log.warning("%s/%s: %s (%s)", target.config_id, model.id, status, note)
        return AggregateResult(
            target.config_id, target.device_id, model.id, kind, n=0, status=status, note=note,
            warmup_runs=config.warmup_runs, concurrency=concurrency,
        )

    if resolve_model_name(model, kind) is None:
        return annotated(UNSUPPORTED, f"no runtime id for {kind}")
    try:
        warmup(target.endpoint, model, config)
    except ModelNotFoundError as exc:
        return annotated(UNSUPPORTED, exc.body or str(exc))
    except UnsupportedRuntimeError as exc:
        return annotated(UNSUPPORTED, str(exc))
    except EdgeBenchError as exc:
        return annotated(FAILED, f"warmup aborted: {exc}")
    if config.warmup_runs == 0:
        log.warning("%s/%s: running without warmup", target.config_id, model.id)

    runs: list[RunRecord] = []
    for i in range(config.runs):
        if i > 0 and config.cooldown_s:
            sleep(config.cooldown_s)
        attempts = 2 if config.retry_failed else 1
        for attempt in range(attempts):
            rec = run_once(target.endpoint, model, config, device_id=target.device_id,
                           config_id=target.config_id, run_index=i)
            on_run(rec)
            runs.append(rec)
            if rec.ok:
                break
            log.warning("%s/%s run %d attempt %d failed: %s",
                        target.config_id, model.id, i, attempt + 1, rec.failure_reason)
    agg = aggregate(runs, config_id=target.config_id, device_id=target.device_id, model_id=model.id,
                    runtime_kind=kind, warmup_runs=config.warmup_runs, concurrency=concurrency)
    if agg.throughput_tps is not None:
        log.info("%s/%s: mean %.3f tok/s over n=%d, per-run deviations %s",
                 target.config_id, model.id, agg.throughput_tps.mean, agg.n,
                 ", ".join(f"{d:+.4f}" for d in agg.per_run_deviations))
    return agg


def run_suite(
    catalog: Catalog,
    targets: Sequence[Target],
    models: Sequence[ModelSpec | str],
    config: BenchmarkConfig,
    *,
    on_run: Callable[[RunRecord], None] = lambda _r: None,
    concurrency: int = 1,
    check_health: bool = True,
    sleep: Callable[[float], None] = time.sleep,
) -> list[AggregateResult]:
    """Benchmark every (target, model) pair.

    Pairs on one target always run sequentially.  ``concurrency > 1`` lets
    distinct targets run in parallel; it is recorded on every result since
    shared power or thermal envelopes make such numbers less comparable.
    ``on_run`` sees every attempt, failed ones included; call sites that
    persist from several threads must make it thread-safe.
    """
    for t in targets:
        try:
            catalog.device(t.device_id)
        except KeyError:
            raise ValidationError(f"endpoint {t.config_id!r}: unknown device {t.device_id!r}") from None
    specs: list[ModelSpec] = []
    for m in models:
        if isinstance(m, str):
            try:
                m = catalog.model(m)
            except KeyError:
                raise ValidationError(f"unknown model {m!r}") from None
        specs.append(m)
    if len({t.endpoint for t in targets}) != len(targets) and concurrency > 1:
        raise ValidationError("concurrent runs require distinct endpoints")

    def per_target(target: Target) -> list[AggregateResult]:
        if check_health and target.endpoint.kind is not RuntimeKind.STACKFLOW_STUB \
                and not health_check(target.endpoint):
            return [
                AggregateResult(target.config_id, target.device_id, m.id, target.endpoint.kind.value, n=0,
                                status=FAILED, note=f"endpoint {target.endpoint.base_url} unhealthy",
                                warmup_runs=config.warmup_runs, concurrency=concurrency)
                for m in specs
            ]
        return [_benchmark_pair(target, m, config, on_run, concurrency, sleep) for m in specs]

    if concurrency <= 1 or len(targets) <= 1:
        results = [per_target(t) for t in targets]
    else:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            results = list(pool.map(per_target, targets))
    return [agg for group in results for agg in group]


@dataclass(frozen=True)
class Suite:
    catalog: Catalog
    targets: tuple[Target, ...]
    model_ids: tuple[str, ...]
    config: BenchmarkConfig
    concurrency: int = 1


_BENCH_KEYS = {f for f in BenchmarkConfig.__dataclass_fields__}


def parse_suite(doc: Mapping[str, Any], base_dir: Path | None = None) -> Suite:
    """Build a :class:`Suite` from a decoded suite document.

    ``catalog`` names a catalog file relative to the suite file (default:
    the bundled one); ``[[device]]``/``[[model]]`` tables in the suite are
    appended to it.
    """
    base_dir = base_dir or Path.cwd()
    cat_ref = doc.get("catalog")
    cat_doc = load_toml((base_dir / cat_ref) if cat_ref else BUNDLED_CATALOG)
    merged = {
        "device": list(cat_doc.get("device", [])) + list(doc.get("device", [])),
        "model": list(cat_doc.get("model", [])) + list(doc.get("model", [])),
    }
    catalog = parse_catalog(merged)

    bench = dict(doc.get("bench", {}))
    unknown = set(bench) - _BENCH_KEYS
    if unknown:
        raise ValidationError(f"bench: unknown field(s) {sorted(unknown)}")
    config = BenchmarkConfig(**bench)

    targets = []
    for i, ep in enumerate(doc.get("endpoint", [])):
        try:
            kind = RuntimeKind(ep["kind"])
            device_id = ep["device_id"]
        except (KeyError, ValueError) as exc:
            raise ValidationError(f"endpoint[{i}]: {exc!r}") from None
        base_url = ep.get("base_url")
        endpoint = (RuntimeEndpoint(kind, base_url, ep.get("chat_path", "/api/chat")) if base_url
                    else RuntimeEndpoint.default(kind))
        targets.append(Target(ep.get("config_id", device_id), device_id, endpoint))
    ids = [t.config_id for t in targets]
    if len(set(ids)) != len(ids):
        raise ValidationError("endpoint.config_id: duplicate config ids")

    model_ids = tuple(doc.get("models") or (m.id for m in catalog.models))
    return Suite(catalog, tuple(targets), model_ids, config, int(doc.get("concurrency", 1)))


def load_suite(path: str | Path) -> Suite:
    path = Path(path)
    return parse_suite(load_toml(path), path.parent)


def with_overrides(config: BenchmarkConfig, **overrides: Any) -> BenchmarkConfig:
    return replace(config, **{k: v for k, v in overrides.items() if v is not None})
