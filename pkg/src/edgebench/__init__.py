"""Streaming LLM inference benchmarking for edge devices."""

__version__ = "0.1.0"
