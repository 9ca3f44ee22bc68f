"""Exception hierarchy. Each class maps to a CLI exit code."""

from __future__ import annotations


class EdgeBenchError(Exception):
    exit_code = 1


class ValidationError(EdgeBenchError, ValueError):
    """Bad input data: catalog entries, configs, traces."""


class CatalogParseError(ValidationError):
    pass


class TransportError(EdgeBenchError):
    """Connect failure, timeout, or dropped connection."""

    exit_code = 2


class ProtocolError(TransportError):
    """A chunk in the response stream could not be interpreted."""


class ModelNotFoundError(TransportError):
    def __init__(self, model: str, body: str = "") -> None:
        super().__init__(f"model {model!r} not found: {body}".rstrip(": "))
        self.model = model
        self.body = body


class UnsupportedRuntimeError(TransportError):
    pass


class AcceptanceError(EdgeBenchError):
    exit_code = 3
