import socket
import statistics
import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgebench.adapters import RuntimeEndpoint
from edgebench.bench import (
    FAILED,
    OK,
    UNSUPPORTED,
    BenchmarkConfig,
    RunRecord,
    Stats,
    Target,
    aggregate,
    load_suite,
    run_once,
    run_suite,
    warmup,
    with_overrides,
)
from edgebench.errors import ModelNotFoundError, TransportError, ValidationError
from edgebench.mock_server import MockProfile

from .conftest import desk_catalog, mock_endpoint

QUICK = BenchmarkConfig(prompt="p", max_new_tokens=5, runs=5, warmup_runs=1, cooldown_s=0)


def target(server, config_id="desk"):
    return Target(config_id, "desk", mock_endpoint(server))


@pytest.mark.slow
def test_run_once_reference_timing(mock_server):
    server = mock_server(MockProfile("m", ttft_ms=500, tokens_per_s=10))
    rec = run_once(mock_endpoint(server), "m", BenchmarkConfig(max_new_tokens=100), device_id="desk")
    assert rec.ok and rec.token_count == 100
    assert rec.ttft_s == pytest.approx(0.5, abs=0.05)
    assert rec.throughput_tps == pytest.approx(9.6, abs=0.1)


def test_run_once_single_token(mock_server):
    server = mock_server(MockProfile("m", ttft_ms=200, tokens_per_s=50))
    rec = run_once(mock_endpoint(server), "m", with_overrides(QUICK, max_new_tokens=1))
    assert rec.ok and rec.token_count == 1
    assert rec.elapsed_s == pytest.approx(rec.ttft_s)
    assert rec.throughput_tps == pytest.approx(1 / rec.ttft_s)
    assert rec.generation_tps is None


def test_run_once_includes_ttft_in_throughput(mock_server):
    server = mock_server(MockProfile("m", ttft_ms=300, tokens_per_s=50))
    rec = run_once(mock_endpoint(server), "m", with_overrides(QUICK, max_new_tokens=20))
    # 20 tokens over 0.3 + 19/50 s
    assert rec.throughput_tps == pytest.approx(20 / 0.68, rel=0.05)
    assert rec.generation_tps == pytest.approx(50, rel=0.1)


def test_run_once_drop_is_failed(mock_server):
    server = mock_server(MockProfile("m", tokens_per_s=500, fail_after_tokens=2))
    rec = run_once(mock_endpoint(server), "m", QUICK)
    assert rec.status == FAILED and rec.token_count == 2
    assert "transport" in rec.failure_reason


def test_run_once_unknown_model_is_failed(mock_server):
    server = mock_server(MockProfile("m"))
    rec = run_once(mock_endpoint(server), "other", QUICK)
    assert rec.status == FAILED and "ModelNotFound" in rec.failure_reason


def test_warmup_absorbs_load_delay(mock_server):
    server = mock_server(MockProfile("m", ttft_ms=50, tokens_per_s=500, first_request_load_ms=800))
    config = with_overrides(QUICK, warmup_max_new_tokens=1)
    warmup(mock_endpoint(server), "m", config)
    rec = run_once(mock_endpoint(server), "m", config)
    assert rec.ttft_s < 0.2


def test_no_warmup_shows_load_delay(mock_server):
    server = mock_server(MockProfile("m", ttft_ms=50, tokens_per_s=500, first_request_load_ms=800))
    results = []
    aggs = run_suite(desk_catalog("m"), [target(server)], ["m"],
                     with_overrides(QUICK, runs=2, warmup_runs=0), on_run=results.append)
    assert results[0].ttft_s > 0.8 > results[1].ttft_s
    assert aggs[0].warmup_runs == 0 and "no warmup" in aggs[0].note


def test_warmup_unreachable_raises():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(TransportError):
        warmup(RuntimeEndpoint("ollama_native", f"http://127.0.0.1:{port}"), "m",
               with_overrides(QUICK, connect_timeout_s=0.5))


def test_warmup_unknown_model(mock_server):
    server = mock_server(MockProfile("m"))
    with pytest.raises(ModelNotFoundError):
        warmup(mock_endpoint(server), "zzz", QUICK)


def test_suite_two_models(mock_server):
    server = mock_server(MockProfile("a", ttft_ms=20, tokens_per_s=400),
                         MockProfile("b", ttft_ms=20, tokens_per_s=200))
    seen = []
    aggs = run_suite(desk_catalog("a", "b"), [target(server)], ["a", "b"], QUICK, on_run=seen.append)
    assert [(a.model_id, a.n, a.status) for a in aggs] == [("a", 5, OK), ("b", 5, OK)]
    assert len(seen) == 10
    for agg in aggs:
        tps = [r.throughput_tps for r in seen if r.model_id == agg.model_id]
        assert agg.throughput_tps.mean == pytest.approx(statistics.fmean(tps))
        assert sum(agg.per_run_deviations) == pytest.approx(0, abs=1e-9)
    assert aggs[0].throughput_tps.mean > aggs[1].throughput_tps.mean


def test_single_run_has_zero_stdev(mock_server):
    server = mock_server(MockProfile("a", tokens_per_s=400))
    (agg,) = run_suite(desk_catalog("a"), [target(server)], ["a"], with_overrides(QUICK, runs=1))
    assert agg.n == 1 and agg.throughput_tps.stdev == 0


def test_unknown_model_is_unsupported_and_suite_continues(mock_server):
    server = mock_server(MockProfile("a", tokens_per_s=400))
    aggs = run_suite(desk_catalog("ghost", "a"), [target(server)], ["ghost", "a"], QUICK)
    assert aggs[0].status == UNSUPPORTED and "ghost" in aggs[0].note
    assert aggs[1].status == OK


def test_failed_runs_are_retried_once_and_excluded(mock_server):
    server = mock_server(MockProfile("a", tokens_per_s=400, fail_after_tokens=2))
    seen = []
    (agg,) = run_suite(desk_catalog("a"), [target(server)], ["a"],
                       with_overrides(QUICK, runs=2, warmup_runs=0), on_run=seen.append)
    assert len(seen) == 4 and all(r.status == FAILED for r in seen)
    assert agg.status == FAILED and agg.n == 0


def test_unhealthy_endpoint():
    dead = Target("desk", "desk", RuntimeEndpoint("ollama_native", "http://127.0.0.1:9"))
    (agg,) = run_suite(desk_catalog("a"), [dead], ["a"], QUICK)
    assert agg.status == FAILED and "unhealthy" in agg.note


def test_deterministic_mock_is_stable(mock_server):
    server = mock_server(MockProfile("a", ttft_ms=100, tokens_per_s=100))
    (agg,) = run_suite(desk_catalog("a"), [target(server)], ["a"], with_overrides(QUICK, max_new_tokens=20))
    assert agg.throughput_tps.stdev / agg.throughput_tps.mean < 0.01


def test_concurrency_across_endpoints(mock_server):
    servers = [mock_server(MockProfile("a", ttft_ms=100, tokens_per_s=100)) for _ in range(2)]
    lock = threading.Lock()
    seen = []

    def on_run(r):
        with lock:
            seen.append(r)

    aggs = run_suite(desk_catalog("a"), [target(s, f"c{i}") for i, s in enumerate(servers)], ["a"],
                     with_overrides(QUICK, runs=2), concurrency=2, on_run=on_run)
    assert {a.config_id for a in aggs} == {"c0", "c1"}
    assert all(a.concurrency == 2 for a in aggs)
    assert len(seen) == 4


def test_concurrency_requires_distinct_endpoints(mock_server):
    server = mock_server(MockProfile("a"))
    with pytest.raises(ValidationError):
        run_suite(desk_catalog("a"), [target(server, "x"), target(server, "y")], ["a"], QUICK, concurrency=2)


def test_unknown_device_rejected(mock_server):
    server = mock_server(MockProfile("a"))
    with pytest.raises(ValidationError, match="unknown device"):
        run_suite(desk_catalog("a"), [Target("x", "nowhere", mock_endpoint(server))], ["a"], QUICK)


@pytest.mark.parametrize("kw", [{"runs": 0}, {"max_new_tokens": 0}, {"warmup_runs": -1}, {"cooldown_s": -1}])
def test_config_validation(kw):
    with pytest.raises(ValidationError):
        BenchmarkConfig(**kw)


def test_stats():
    assert Stats.of([5.0]) == Stats(5.0, 0.0, 5.0, 5.0)
    s = Stats.of([1.0, 2.0, 3.0])
    assert (s.mean, s.stdev, s.min, s.max) == (2.0, 1.0, 1.0, 3.0)


def synthetic(submit, ttft_ns, gap_ns, n, **kw):
    from datetime import datetime, timezone
    first = submit + ttft_ns
    return RunRecord("d", "m", "mock", "d", submit, first, first + gap_ns * (n - 1),
                     datetime(2026, 1, 1, tzinfo=timezone.utc), n, **kw)


@given(
    st.integers(min_value=1, max_value=10**9),
    st.integers(min_value=1, max_value=10**10),
    st.integers(min_value=0, max_value=10**9),
    st.integers(min_value=1, max_value=2000),
)
def test_run_invariants(submit, ttft, gap, n):
    r = synthetic(submit, ttft, gap, n)
    assert 0 < r.ttft_s <= r.elapsed_s
    assert r.throughput_tps * r.elapsed_s == pytest.approx(n)


def test_aggregate_ignores_failed_runs():
    good = synthetic(0, 10**9, 10**8, 11)
    bad = synthetic(0, 10**9, 10**8, 3, status=FAILED)
    agg = aggregate([good, bad], config_id="d", device_id="d", model_id="m", runtime_kind="mock")
    assert agg.n == 1
    assert agg.throughput_tps.mean == pytest.approx(5.5)


def test_run_record_round_trip():
    r = synthetic(123, 10**9, 10**7, 4)
    assert RunRecord.from_dict(r.to_dict()) == r


def test_load_suite(tmp_path):
    p = tmp_path / "suite.toml"
    p.write_text(
        'models = ["llama3.2-1b"]\n'
        "[bench]\nruns = 3\nmax_new_tokens = 50\n"
        '[[endpoint]]\nconfig_id = "jetson-gpu"\ndevice_id = "jetson-orin-nano"\nkind = "ollama_native"\n'
        '[[endpoint]]\ndevice_id = "rpi5-hat"\nkind = "hailo_ollama"\nbase_url = "http://hat:8000"\n'
    )
    suite = load_suite(p)
    assert suite.config.runs == 3 and suite.config.max_new_tokens == 50
    assert [t.config_id for t in suite.targets] == ["jetson-gpu", "rpi5-hat"]
    assert suite.targets[0].endpoint.chat_url == "http://127.0.0.1:11434/api/chat"
    assert suite.targets[1].endpoint.chat_url == "http://hat:8000/api/chat"
    assert suite.model_ids == ("llama3.2-1b",)


def test_suite_rejects_unknown_bench_key(tmp_path):
    p = tmp_path / "suite.toml"
    p.write_text("[bench]\nrunz = 3\n")
    with pytest.raises(ValidationError, match="runz"):
        load_suite(p)


@pytest.mark.parametrize("name", ["suite.toml", "mock_suite.toml"])
def test_sample_suites_parse(name):
    from pathlib import Path

    suite = load_suite(Path(__file__).parent.parent / "configs" / name)
    for model_id in suite.model_ids:
        suite.catalog.model(model_id)
    for t in suite.targets:
        suite.catalog.device(t.device_id)
