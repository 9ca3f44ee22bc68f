"""Deterministic Ollama-compatible streaming server for desk-scale testing.

Token ``k`` (0-based) of a response is released at an absolute deadline:
``start + ttft + sum(gap_1..gap_k)`` where each gap is ``1/tokens_per_s``
scaled by a seeded uniform jitter.  Sleeping to deadlines rather than
accumulating sleeps keeps the stream free of drift.
"""

from __future__ import annotations

import json
import logging
import random
import socket
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Iterable, Sequence

from .catalog import load_toml
from .errors import ValidationError

log = logging.getLogger(__name__)

DEFAULT_NUM_PREDICT = 128
MOCK_VERSION = "0.0.0-mock"


@dataclass(frozen=True)
class MockProfile:
    model_id: str
    ttft_ms: float = 0.0
    tokens_per_s: float = 10.0
    first_request_load_ms: float = 0.0
    jitter_pct: float = 0.0
    fail_after_tokens: int | None = None
    max_tokens: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.tokens_per_s > 0:
            raise ValidationError(f"profile {self.model_id!r}: tokens_per_s must be > 0")
        if not 0 <= self.jitter_pct < 100:
            raise ValidationError(f"profile {self.model_id!r}: jitter_pct must be in [0, 100)")
        if self.ttft_ms < 0 or self.first_request_load_ms < 0:
            raise ValidationError(f"profile {self.model_id!r}: delays must be >= 0")
        if self.fail_after_tokens is not None and self.fail_after_tokens < 0:
            raise ValidationError(f"profile {self.model_id!r}: fail_after_tokens must be >= 0")
        if self.max_tokens is not None and self.max_tokens < 1:
            raise ValidationError(f"profile {self.model_id!r}: max_tokens must be >= 1")


def load_profiles(path: str | Path) -> list[MockProfile]:
    """Read ``[[profile]]`` tables from a TOML file."""
    doc = load_toml(path)
    out = []
    for i, table in enumerate(doc.get("profile", [])):
        try:
            out.append(MockProfile(**table))
        except TypeError as exc:
            raise ValidationError(f"profile[{i}]: {exc}") from None
    return out


@dataclass
class _ModelState:
    profile: MockProfile
    ready_at: float | None = None
    requests: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock)

    def admit(self, now: float) -> tuple[float, int]:
        """Return (time generation may start, request ordinal)."""
        with self.lock:
            if self.ready_at is None:
                self.ready_at = now + self.profile.first_request_load_ms / 1000
            ordinal = self.requests
            self.requests += 1
            return max(now, self.ready_at), ordinal


def _sleep_until(deadline: float) -> None:
    while True:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            return
        time.sleep(remaining)


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    disable_nagle_algorithm = True
    server: _MockHTTPServer

    def log_message(self, fmt: str, *args: Any) -> None:
        log.debug("mock %s - %s", self.address_string(), fmt % args)

    def _send_json(self, status: int, obj: Any) -> None:
        body = json.dumps(obj).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:
        if self.path == "/":
            body = b"Ollama is running"
            self.send_response(200)
            self.send_header("Content-Type", "text/plain")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        elif self.path == "/api/version":
            self._send_json(200, {"version": MOCK_VERSION})
        elif self.path == "/api/tags":
            self._send_json(200, {"models": [{"name": m, "model": m} for m in self.server.models]})
        else:
            self._send_json(404, {"error": "not found"})

    def do_POST(self) -> None:
        if self.path != "/api/chat":
            self._send_json(404, {"error": "not found"})
            return
        received = time.monotonic()
        length = int(self.headers.get("Content-Length", 0))
        try:
            req = json.loads(self.rfile.read(length) or b"{}")
        except json.JSONDecodeError:
            self._send_json(400, {"error": "invalid JSON body"})
            return
        model = req.get("model", "")
        state = self.server.models.get(model)
        if state is None:
            self._send_json(404, {"error": f'model "{model}" not found, try pulling it first'})
            return
        self._stream(state, req, received)

    def _chunk(self, obj: dict[str, Any]) -> None:
        data = (json.dumps(obj) + "\n").encode()
        self.wfile.write(b"%x\r\n%s\r\n" % (len(data), data))
        self.wfile.flush()

    def _stream(self, state: _ModelState, req: dict[str, Any], received: float) -> None:
        profile = state.profile
        start, ordinal = state.admit(received)
        requested = int((req.get("options") or {}).get("num_predict", DEFAULT_NUM_PREDICT))
        if requested < 0:
            requested = DEFAULT_NUM_PREDICT
        n_tokens = requested if profile.max_tokens is None else min(requested, profile.max_tokens)
        rng = random.Random(f"{profile.seed}:{profile.model_id}:{ordinal}")
        gap = 1.0 / profile.tokens_per_s
        jitter = profile.jitter_pct / 100

        self.send_response(200)
        self.send_header("Content-Type", "application/x-ndjson")
        self.send_header("Transfer-Encoding", "chunked")
        self.end_headers()
        self.wfile.flush()

        deadline = start + profile.ttft_ms / 1000
        first_at = None
        for k in range(n_tokens):
            if k > 0:
                deadline += gap * (1 + rng.uniform(-jitter, jitter)) if jitter else gap
            if profile.fail_after_tokens is not None and k >= profile.fail_after_tokens:
                self._drop()
                return
            _sleep_until(deadline)
            if first_at is None:
                first_at = time.monotonic()
            self._chunk({
                "model": profile.model_id,
                "created_at": _now_iso(),
                "message": {"role": "assistant", "content": f"tok{k}"},
                "done": False,
            })
        if profile.fail_after_tokens is not None and n_tokens >= profile.fail_after_tokens:
            self._drop()
            return
        end = time.monotonic()
        self._chunk({
            "model": profile.model_id,
            "created_at": _now_iso(),
            "message": {"role": "assistant", "content": ""},
            "done": True,
            "done_reason": "length" if n_tokens == requested else "stop",
            "total_duration": int((end - received) * 1e9),
            "load_duration": int((start - received) * 1e9),
            "eval_count": n_tokens,
            "eval_duration": int((end - (first_at or end)) * 1e9),
        })
        self.wfile.write(b"0\r\n\r\n")
        self.wfile.flush()

    def _drop(self) -> None:
        self.wfile.flush()
        try:
            self.connection.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.close_connection = True


class _MockHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr: tuple[str, int], profiles: Iterable[MockProfile]) -> None:
        self.models: dict[str, _ModelState] = {}
        for p in profiles:
            if p.model_id in self.models:
                raise ValidationError(f"duplicate mock profile {p.model_id!r}")
            self.models[p.model_id] = _ModelState(p)
        super().__init__(addr, _Handler)


class MockServer:
    """Running mock server; use as a context manager or call :meth:`stop`."""

    def __init__(self, profiles: Sequence[MockProfile], host: str = "127.0.0.1", port: int = 0) -> None:
        self._httpd = _MockHTTPServer((host, port), profiles)
        self._thread = threading.Thread(target=self._httpd.serve_forever, name="mock-ollama", daemon=True)
        self._thread.start()

    @property
    def host(self) -> str:
        return self._httpd.server_address[0]

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def request_count(self, model_id: str) -> int:
        return self._httpd.models[model_id].requests

    def serve_forever(self) -> None:
        self._thread.join()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> MockServer:
        return self

    def __exit__(self, *exc: object) -> None:
        self.stop()


def parse_bind(bind: str) -> tuple[str, int]:
    host, _, port = bind.rpartition(":")
    if not host or not port.isdigit():
        raise ValidationError(f"--bind expects HOST:PORT, got {bind!r}")
    return host, int(port)


def serve(profiles: Sequence[MockProfile], bind: str | tuple[str, int] = ("127.0.0.1", 0)) -> MockServer:
    host, port = parse_bind(bind) if isinstance(bind, str) else bind
    try:
        return MockServer(profiles, host, port)
    except OSError as exc:
        raise ValidationError(f"cannot bind mock server to {host}:{port}: {exc}") from None
