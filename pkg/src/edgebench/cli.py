"""Command-line entry point.

Exit codes: 0 ok, 1 validation/config error, 2 endpoint/transport failure,
3 acceptance-check failure.  Errors print one line to stderr:
``<ErrorClass>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

from .adapters import RuntimeEndpoint
from .bench import FAILED, Target, load_suite, parse_suite, run_suite, with_overrides
from .catalog import BUNDLED_CATALOG, Catalog, RuntimeKind, load_catalog
from .energy import DEFAULT_MAX_SKEW_S, constant_power, energy_for_window, read_trace_csv, run_window_utc
from .errors import AcceptanceError, EdgeBenchError, TransportError, ValidationError
from .metrics import pareto_frontier, split_missing
from .mock_server import MockProfile, load_profiles, serve
from .report import GOLDEN_TABLE, Figure, export_figure_data, load_golden, metric_vectors, render_table
from .store import STORE_ENV, ResultStore, config_hash

log = logging.getLogger("edgebench")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise ValidationError(f"{self.prog}: {message}")


def _store(args: argparse.Namespace) -> ResultStore:
    return ResultStore.from_env(args.store)


def _catalog(args: argparse.Namespace) -> Catalog:
    return load_catalog(args.catalog or BUNDLED_CATALOG)


def _parse_endpoint(spec: str) -> RuntimeEndpoint:
    """``KIND`` (default host/port) or ``KIND=URL``."""
    kind, _, url = spec.partition("=")
    try:
        RuntimeKind(kind)
    except ValueError:
        raise ValidationError(f"--endpoint: unknown runtime kind {kind!r}") from None
    return RuntimeEndpoint(kind, url) if url else RuntimeEndpoint.default(kind)


def cmd_run(args: argparse.Namespace) -> int:
    if args.config:
        suite = load_suite(args.config)
    else:
        suite = parse_suite({"catalog": str(args.catalog)} if args.catalog else {})
    targets = list(suite.targets)
    if args.endpoint:
        if not args.device:
            raise ValidationError("--endpoint requires --device")
        targets = [Target(args.config_id or args.device, args.device, _parse_endpoint(args.endpoint))]
    if not targets:
        raise ValidationError("no endpoints configured (use --config or --endpoint)")
    model_ids = args.model or list(suite.model_ids)
    config = with_overrides(suite.config, runs=args.runs, max_new_tokens=args.num_predict,
                            cooldown_s=args.cooldown_s, warmup_runs=args.warmup_runs)

    store = _store(args).init()

    def on_run(run):
        if args.constant_power_w is not None and run.ok:
            run.energy = constant_power(args.constant_power_w, run.elapsed_s)
        store.persist_run(run)

    results = run_suite(suite.catalog, targets, model_ids, config, on_run=on_run,
                        concurrency=suite.concurrency)
    previous = {a.key: a for a in store.load_aggregates()}
    previous.update({a.key: a for a in results})
    meta = {
        "suite_config_hash": config_hash({
            "bench": config.__dict__,
            "targets": [(t.config_id, t.device_id, t.endpoint.kind.value, t.endpoint.chat_url) for t in targets],
            "models": model_ids,
        }),
        "concurrency": suite.concurrency,
    }
    store.save_aggregates(previous.values(), meta)
    print(render_table(results, catalog=suite.catalog), end="")
    failed = [a for a in results if a.status == FAILED]
    if failed:
        raise TransportError(f"{len(failed)} configuration(s) failed: "
                             + "; ".join(f"{a.config_id}/{a.model_id}: {a.note}" for a in failed))
    return 0


def cmd_ingest_power(args: argparse.Namespace) -> int:
    if (args.power_trace is None) == (args.constant_power_w is None):
        raise ValidationError("give exactly one of --power-trace or --constant-power-w")
    store = _store(args)
    runs = [r for r in store.load_runs() if r.ok]
    if args.device:
        runs = [r for r in runs if r.device_id == args.device]
    if args.config_id:
        runs = [r for r in runs if r.config_id == args.config_id]
    if not runs:
        raise ValidationError("no successful runs match the selection")
    trace = read_trace_csv(args.power_trace) if args.power_trace else None
    attached = skipped = 0
    for run in runs:
        if trace is None:
            energy = constant_power(args.constant_power_w, run.elapsed_s)
        else:
            window = run_window_utc(run.wall_start_utc, run.elapsed_s)
            try:
                energy = energy_for_window(trace, window, max_skew_s=args.max_skew_s,
                                           idle_baseline_w=args.idle_baseline_w)
            except ValidationError as exc:
                log.warning("run %s skipped: %s", run.run_id, exc)
                skipped += 1
                continue
            if energy.extrapolated:
                log.warning("run %s: window extrapolated past trace edge (clock skew?)", run.run_id)
        store.persist_energy(run, energy)
        attached += 1
    stored = {a.key: a for a in store.load_aggregates()}
    for agg in store.recompute_aggregates():
        stored[agg.key] = agg
    store.save_aggregates(stored.values(), store.load_metadata())
    print(f"energy attached to {attached} run(s), {skipped} skipped")
    if attached == 0:
        raise ValidationError("power trace does not cover any selected run")
    return 0


def _results(args: argparse.Namespace):
    if args.fixture:
        return load_golden(args.fixture if isinstance(args.fixture, str) else GOLDEN_TABLE)
    return _store(args).load_aggregates()


def _parse_objectives(spec: str) -> list[tuple[str, str]]:
    out = []
    for part in spec.split(","):
        name, _, direction = part.partition(":")
        out.append((name.strip(), (direction or "max").strip()))
    return out


def cmd_metrics(args: argparse.Namespace) -> int:
    catalog = _catalog(args)
    vectors = metric_vectors(_results(args), catalog)
    objectives = _parse_objectives(args.objectives)
    groups: dict[str, list] = {"all": vectors}
    if args.per_model:
        groups = {}
        for v in vectors:
            groups.setdefault(v.model_id, []).append(v)
    out = {"vectors": [], "frontiers": {}}
    for v in vectors:
        out["vectors"].append({
            "config": v.config_id, "model": v.model_id, "throughput_tps": v.throughput_tps,
            "ttft_s": v.ttft_s, "mj_per_mtok": v.mj_per_mtok, "power_w": v.power_w,
            "volume_m3": v.volume_m3, "tps_per_m3": v.tps_per_m3,
        })
    for name, pts in groups.items():
        usable, missing = split_missing(pts, objectives)
        front = pareto_frontier(usable, objectives) if usable else []
        out["frontiers"][name] = {
            "members": [f"{v.config_id}/{v.model_id}" for v in front],
            "excluded_missing_metric": [f"{v.config_id}/{v.model_id}" for v in missing],
        }
    print(json.dumps(out, indent=2))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    print(render_table(_results(args), catalog=_catalog(args)), end="")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    catalog = _catalog(args)
    results = _results(args)
    figures = list(Figure) if args.figure == "all" else [Figure(args.figure)]
    store = None if args.fixture and not (args.store or os.environ.get(STORE_ENV)) else _store(args)
    for fig in figures:
        data = export_figure_data(results, fig, catalog, models=args.models)
        if store is None:
            print(f"# {fig.value}")
            print(data.csv_text, end="")
        else:
            path = data.write(store.exports_dir)
            print(path)
        for note in data.exclusions:
            log.info("%s: excluded %s", fig.value, note)
    return 0


def cmd_mock_serve(args: argparse.Namespace) -> int:
    profiles = load_profiles(args.profiles) if args.profiles else []
    for spec in args.profile or []:
        model, _, nums = spec.rpartition("=")
        try:
            values = [float(x) for x in nums.split(",")]
        except ValueError:
            values = []
        if not model or len(values) not in (2, 3):
            raise ValidationError(f"--profile expects MODEL=TTFT_MS,TOK_PER_S[,LOAD_MS], got {spec!r}")
        profiles.append(MockProfile(model, ttft_ms=values[0], tokens_per_s=values[1],
                                    first_request_load_ms=values[2] if len(values) > 2 else 0.0))
    if not profiles:
        raise ValidationError("mock-serve needs --profiles FILE or at least one --profile")
    server = serve(profiles, args.bind)
    print(f"mock server listening on {server.url} for {', '.join(p.model_id for p in profiles)}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def cmd_validate_fixture(args: argparse.Namespace) -> int:
    from .acceptance import run_checks

    results = run_checks(include_mock=args.include_mock)
    for r in results:
        print(r.line())
        if args.verbose or not r.passed:
            for d in r.details:
                print(f"    {d}")
    if not all(r.passed for r in results):
        raise AcceptanceError(f"{sum(not r.passed for r in results)} acceptance check(s) failed")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgebench", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    def common(sp: argparse.ArgumentParser, store: bool = True) -> None:
        if store:
            sp.add_argument("--store", help="result store directory (default: $EDGEBENCH_STORE)")
        sp.add_argument("--catalog", help="catalog TOML (default: bundled)")

    sp = sub.add_parser("run", help="benchmark endpoints and persist results")
    common(sp)
    sp.add_argument("--config", help="suite TOML")
    sp.add_argument("--endpoint", help="KIND or KIND=URL; replaces the suite's endpoints")
    sp.add_argument("--device", help="device id for --endpoint")
    sp.add_argument("--config-id", help="configuration id for --endpoint (default: device id)")
    sp.add_argument("--model", action="append", help="model id (repeatable)")
    sp.add_argument("--runs", type=int)
    sp.add_argument("--num-predict", type=int)
    sp.add_argument("--warmup-runs", type=int)
    sp.add_argument("--cooldown-s", type=float)
    sp.add_argument("--constant-power-w", type=float, help="attach constant-power energy to each run")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("ingest-power", help="attach power-meter energy to stored runs")
    common(sp)
    sp.add_argument("--power-trace", help="CSV with timestamp_utc_ms,watts")
    sp.add_argument("--constant-power-w", type=float)
    sp.add_argument("--device", help="only runs on this device")
    sp.add_argument("--config-id", help="only runs of this configuration")
    sp.add_argument("--max-skew-s", type=float, default=DEFAULT_MAX_SKEW_S)
    sp.add_argument("--idle-baseline-w", type=float, default=0.0,
                    help="subtract a constant idle draw (default: device-total energy)")
    sp.set_defaults(func=cmd_ingest_power)

    for name, func, help_ in (("metrics", cmd_metrics, "composite metrics and Pareto frontiers (JSON)"),
                              ("report", cmd_report, "render the results table"),
                              ("export", cmd_export, "write figure datasets as CSV")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        sp.add_argument("--fixture", nargs="?", const=True, default=None,
                        help="use the golden fixture (optionally a path) instead of the store")
        if name == "metrics":
            sp.add_argument("--objectives", default="throughput_tps:max,mj_per_mtok:min")
            sp.add_argument("--per-model", action="store_true", help="one frontier per model")
        if name == "export":
            sp.add_argument("--figure", default="all", choices=["all", *(f.value for f in Figure)])
            sp.add_argument("--models", nargs="+", help="surface rows (default: models supported everywhere)")
        sp.set_defaults(func=func)

    sp = sub.add_parser("mock-serve", help="start the mock Ollama server")
    sp.add_argument("--bind", default="127.0.0.1:11434", help="HOST:PORT")
    sp.add_argument("--profiles", help="TOML with [[profile]] tables")
    sp.add_argument("--profile", action="append", help="MODEL=TTFT_MS,TOK_PER_S[,LOAD_MS] (repeatable)")
    sp.set_defaults(func=cmd_mock_serve)

    sp = sub.add_parser("validate-fixture", help="replay acceptance checks")
    sp.add_argument("--include-mock", action="store_true", help="also run the timed mock end-to-end check")
    sp.set_defaults(func=cmd_validate_fixture)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        return args.func(args)
    except EdgeBenchError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"ValidationError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
