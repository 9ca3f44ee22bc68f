"""Streaming chat clients for Ollama-style runtimes.

Both Ollama kinds speak the same wire protocol: POST ``/api/chat`` with
``stream: true`` and read back newline-delimited JSON.  Non-final chunks carry
``message.content``; the final chunk has ``done: true`` and optionally
``eval_count`` / ``eval_duration``.  Every line is stamped with
``time.monotonic_ns()`` as soon as it is read off the socket, before it is
decoded.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import httpx

from .catalog import RuntimeKind
from .errors import ModelNotFoundError, ProtocolError, UnsupportedRuntimeError

log = logging.getLogger(__name__)

DEFAULT_PORTS = {RuntimeKind.OLLAMA_NATIVE: 11434, RuntimeKind.HAILO_OLLAMA: 8000}
DEFAULT_CHAT_PATH = "/api/chat"
VERSION_PATH = "/api/version"

CONNECT_TIMEOUT_S = 5.0
INTER_CHUNK_TIMEOUT_S = 120.0


@dataclass(frozen=True)
class RuntimeEndpoint:
    kind: RuntimeKind
    base_url: str
    chat_path: str = DEFAULT_CHAT_PATH

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RuntimeKind(self.kind))
        object.__setattr__(self, "base_url", self.base_url.rstrip("/"))

    @classmethod
    def default(cls, kind: RuntimeKind | str, host: str = "127.0.0.1") -> RuntimeEndpoint:
        kind = RuntimeKind(kind)
        port = DEFAULT_PORTS.get(kind)
        if port is None:
            raise ValueError(f"no default port for runtime {kind.value}")
        return cls(kind, f"http://{host}:{port}")

    @property
    def chat_url(self) -> str:
        return self.base_url + self.chat_path


@dataclass(frozen=True)
class InferenceRequest:
    model_id: str
    prompt: str
    max_new_tokens: int = 100
    decode_params: Mapping[str, Any] = field(default_factory=dict)
    stream: bool = True

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if not self.stream:
            raise ValueError("only streaming requests are supported")

    def payload(self) -> dict[str, Any]:
        options = dict(self.decode_params)
        options["num_predict"] = self.max_new_tokens
        return {
            "model": self.model_id,
            "messages": [{"role": "user", "content": self.prompt}],
            "stream": True,
            "options": options,
        }


@dataclass(frozen=True)
class ServerCounters:
    eval_count: int
    eval_duration_ns: int


@dataclass(frozen=True)
class TokenEvent:
    recv_monotonic_ns: int
    text_fragment: str
    is_final: bool = False
    server_reported: ServerCounters | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "recv_monotonic_ns": self.recv_monotonic_ns,
            "text_fragment": self.text_fragment,
            "is_final": self.is_final,
        }
        if self.server_reported is not None:
            d["server_reported"] = {
                "eval_count": self.server_reported.eval_count,
                "eval_duration_ns": self.server_reported.eval_duration_ns,
            }
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TokenEvent:
        sr = d.get("server_reported")
        return cls(
            recv_monotonic_ns=int(d["recv_monotonic_ns"]),
            text_fragment=d["text_fragment"],
            is_final=bool(d["is_final"]),
            server_reported=ServerCounters(int(sr["eval_count"]), int(sr["eval_duration_ns"])) if sr else None,
        )


@dataclass(frozen=True)
class ChatCompletion:
    total_events: int
    transport_ok: bool
    error: str | None = None


def stream_timeout(connect_s: float, inter_chunk_s: float) -> httpx.Timeout:
    return httpx.Timeout(connect=connect_s, read=inter_chunk_s, write=connect_s, pool=connect_s)


def _parse_chunk(line: str, recv_ns: int) -> TokenEvent:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed chunk {line[:200]!r}: {exc}") from None
    if not isinstance(obj, dict):
        raise ProtocolError(f"chunk is not a JSON object: {line[:200]!r}")
    if "error" in obj:
        raise ProtocolError(f"runtime error mid-stream: {obj['error']}")
    if obj.get("done"):
        counters = None
        if "eval_count" in obj:
            counters = ServerCounters(int(obj["eval_count"]), int(obj.get("eval_duration", 0)))
        text = (obj.get("message") or {}).get("content", "")
        return TokenEvent(recv_ns, text, True, counters)
    message = obj.get("message")
    if not isinstance(message, dict) or "content" not in message:
        raise ProtocolError(f"chunk without message.content: {line[:200]!r}")
    return TokenEvent(recv_ns, message["content"])


def chat_stream(
    endpoint: RuntimeEndpoint,
    request: InferenceRequest,
    sink: Callable[[TokenEvent], None],
    *,
    connect_timeout_s: float = CONNECT_TIMEOUT_S,
    inter_chunk_timeout_s: float = INTER_CHUNK_TIMEOUT_S,
    client: httpx.Client | None = None,
) -> ChatCompletion:
    """Send one streaming chat request and forward token events to ``sink``.

    Connect failures, timeouts and dropped connections are returned as
    ``transport_ok=False``.  A malformed chunk raises :class:`ProtocolError`
    and a 404 raises :class:`ModelNotFoundError` carrying the runtime's body.
    """
    if endpoint.kind is RuntimeKind.STACKFLOW_STUB:
        raise UnsupportedRuntimeError("StackFlow runtime protocol is not implemented")

    own_client = client is None
    if own_client:
        client = httpx.Client(timeout=stream_timeout(connect_timeout_s, inter_chunk_timeout_s))
    count = 0
    try:
        with client.stream("POST", endpoint.chat_url, json=request.payload()) as resp:
            if resp.status_code == 404:
                raise ModelNotFoundError(request.model_id, resp.read().decode("utf-8", "replace"))
            if resp.status_code != 200:
                body = resp.read().decode("utf-8", "replace")
                raise ProtocolError(f"HTTP {resp.status_code} from {endpoint.chat_url}: {body[:500]}")
            for line in resp.iter_lines():
                recv_ns = time.monotonic_ns()
                if not line.strip():
                    continue
                event = _parse_chunk(line, recv_ns)
                count += 1
                sink(event)
                if event.is_final:
                    return ChatCompletion(count, True)
        raise ProtocolError(f"stream ended after {count} events without a final chunk")
    except httpx.TimeoutException as exc:
        return ChatCompletion(count, False, f"timeout: {exc!r}")
    except httpx.TransportError as exc:
        # ConnectError, RemoteProtocolError (peer dropped mid-body), ReadError...
        kind = "connect error" if isinstance(exc, httpx.ConnectError) else "transport error"
        return ChatCompletion(count, False, f"{kind}: {exc}")
    finally:
        if own_client:
            client.close()


def health_check(endpoint: RuntimeEndpoint, timeout_s: float = 2.0) -> bool:
    if endpoint.kind is RuntimeKind.STACKFLOW_STUB:
        return False
    try:
        resp = httpx.get(endpoint.base_url + VERSION_PATH, timeout=timeout_s)
    except Exception:
        return False
    return resp.status_code == 200
