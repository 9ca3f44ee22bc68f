from __future__ import annotations

import pytest

from edgebench.adapters import RuntimeEndpoint
from edgebench.catalog import Catalog, DeviceProfile, ModelSpec, load_catalog
from edgebench.mock_server import MockProfile, serve
from edgebench.report import load_golden


@pytest.fixture(scope="session")
def catalog():
    return load_catalog()


@pytest.fixture(scope="session")
def golden():
    return load_golden()


@pytest.fixture
def mock_server():
    """Factory: ``mock_server(*profiles)`` -> running server, stopped at teardown."""
    servers = []

    def start(*profiles: MockProfile):
        s = serve(list(profiles))
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.stop()


def mock_endpoint(server, kind: str = "mock") -> RuntimeEndpoint:
    return RuntimeEndpoint(kind, server.url)


def desk_catalog(*model_ids: str) -> Catalog:
    """A one-device catalog whose models map 1:1 onto mock model names."""
    return Catalog(
        (DeviceProfile("desk", "desk", 100, 100, 10),),
        tuple(ModelSpec(m, "mock", 1.0, runtime_model_ids={"mock": m, "ollama_native": m}) for m in model_ids),
    )
