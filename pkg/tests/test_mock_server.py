import json
import threading
import time

import httpx
import pytest

from edgebench.adapters import InferenceRequest, chat_stream
from edgebench.errors import ValidationError
from edgebench.mock_server import MockProfile, load_profiles, parse_bind

from .conftest import mock_endpoint


def stream(server, model, n):
    """Return (seconds to first token, seconds to final event, events)."""
    events = []
    with httpx.Client(timeout=30) as client:
        t0 = time.monotonic_ns()
        result = chat_stream(
            mock_endpoint(server), InferenceRequest(model, "p", max_new_tokens=n), events.append, client=client
        )
    first = (events[0].recv_monotonic_ns - t0) / 1e9 if events else None
    last = (events[-1].recv_monotonic_ns - t0) / 1e9 if events else None
    return result, first, last, events


def test_root_and_version(mock_server):
    server = mock_server(MockProfile("m"))
    assert httpx.get(server.url + "/").text.startswith("Ollama is running")
    assert "version" in httpx.get(server.url + "/api/version").json()
    tags = httpx.get(server.url + "/api/tags").json()
    assert [m["name"] for m in tags["models"]] == ["m"]


def test_unknown_model_404(mock_server):
    server = mock_server(MockProfile("m"))
    r = httpx.post(server.url + "/api/chat", json={"model": "zzz", "messages": []})
    assert r.status_code == 404
    assert "zzz" in r.json()["error"]


def test_timing_scaled(mock_server):
    server = mock_server(MockProfile("m", ttft_ms=200, tokens_per_s=50))
    result, first, last, events = stream(server, "m", 20)
    assert result.transport_ok and len(events) == 21
    assert first == pytest.approx(0.2, abs=0.05)
    # 19 inter-token gaps at 20 ms each
    assert last == pytest.approx(0.2 + 19 / 50, abs=0.06)


@pytest.mark.slow
def test_timing_hundred_tokens(mock_server):
    server = mock_server(MockProfile("m", ttft_ms=500, tokens_per_s=10))
    _, first, last, events = stream(server, "m", 100)
    assert first == pytest.approx(0.5, abs=0.05)
    assert last == pytest.approx(10.4, abs=0.1)
    assert 100 / last == pytest.approx(9.6, rel=0.02)


def test_eval_count_matches_emitted(mock_server):
    server = mock_server(MockProfile("m", tokens_per_s=1000, max_tokens=4))
    _, _, _, events = stream(server, "m", 50)
    final = events[-1].server_reported
    assert final.eval_count == 4 == len(events) - 1
    assert final.eval_duration_ns > 0


def test_fail_after_tokens(mock_server):
    server = mock_server(MockProfile("m", tokens_per_s=1000, fail_after_tokens=3))
    result, _, _, events = stream(server, "m", 10)
    assert not result.transport_ok
    assert len(events) == 3


def test_fail_after_zero_tokens(mock_server):
    server = mock_server(MockProfile("m", tokens_per_s=1000, fail_after_tokens=0))
    result, _, _, events = stream(server, "m", 10)
    assert not result.transport_ok and events == []


def test_load_delay_only_on_first_request(mock_server):
    server = mock_server(MockProfile("m", ttft_ms=50, tokens_per_s=1000, first_request_load_ms=600))
    _, first_a, _, _ = stream(server, "m", 1)
    _, first_b, _, _ = stream(server, "m", 1)
    assert first_a == pytest.approx(0.65, abs=0.06)
    assert first_b == pytest.approx(0.05, abs=0.04)
    assert server.request_count("m") == 2


def test_load_delay_is_per_model(mock_server):
    server = mock_server(
        MockProfile("a", tokens_per_s=1000, first_request_load_ms=300),
        MockProfile("b", tokens_per_s=1000, first_request_load_ms=300),
    )
    stream(server, "a", 1)
    _, first_b, _, _ = stream(server, "b", 1)
    assert first_b > 0.25


def test_concurrent_streams(mock_server):
    server = mock_server(MockProfile("m", ttft_ms=100, tokens_per_s=50))
    out = []
    threads = [threading.Thread(target=lambda: out.append(stream(server, "m", 10))) for _ in range(4)]
    t0 = time.monotonic()
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(r[0].transport_ok and len(r[3]) == 11 for r in out)
    # served in parallel, not one after another
    assert time.monotonic() - t0 < 1.0


def test_jitter_is_seeded(mock_server):
    def gaps(seed):
        server = mock_server(MockProfile("m", tokens_per_s=100, jitter_pct=50, seed=seed))
        _, _, _, events = stream(server, "m", 10)
        return [b.recv_monotonic_ns - a.recv_monotonic_ns for a, b in zip(events, events[1:-1])]

    a, b = gaps(1), gaps(1)
    # same seed, same schedule within scheduling noise
    assert all(abs(x - y) < 5e6 for x, y in zip(a, b))


@pytest.mark.parametrize(
    "kw",
    [{"tokens_per_s": 0}, {"jitter_pct": 100}, {"ttft_ms": -1}, {"fail_after_tokens": -1}, {"max_tokens": 0}],
)
def test_profile_validation(kw):
    with pytest.raises(ValidationError):
        MockProfile("m", **kw)


def test_load_profiles(tmp_path):
    p = tmp_path / "p.toml"
    p.write_text('[[profile]]\nmodel_id = "m"\nttft_ms = 800\ntokens_per_s = 5\n')
    assert load_profiles(p) == [MockProfile("m", ttft_ms=800, tokens_per_s=5)]


def test_parse_bind():
    assert parse_bind("0.0.0.0:11434") == ("0.0.0.0", 11434)
    with pytest.raises(ValidationError):
        parse_bind("nope")


def test_final_chunk_fields(mock_server):
    server = mock_server(MockProfile("m", tokens_per_s=1000))
    with httpx.stream("POST", server.url + "/api/chat",
                      json={"model": "m", "messages": [], "options": {"num_predict": 2}}) as r:
        lines = [json.loads(x) for x in r.iter_lines() if x]
    assert [x["done"] for x in lines] == [False, False, True]
    assert lines[-1]["eval_count"] == 2
    assert lines[0]["message"]["content"]


def test_sample_profiles_parse():
    from pathlib import Path

    profiles = load_profiles(Path(__file__).parent.parent / "configs" / "mock_profiles.toml")
    assert [p.model_id for p in profiles] == ["llama3.2:1b", "qwen2.5:0.5b"]
