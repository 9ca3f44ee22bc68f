"""Device and model registry.

The catalog file is TOML with ``[[device]]`` and ``[[model]]`` arrays whose
keys match the dataclass fields below.  Device dimensions are the bounding
box in millimetres; volume is derived from them with no enclosure allowance.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Sequence

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import CatalogParseError, ValidationError

Q4_K_M = "Q4_K_M"

FIXTURE_DIR = Path(__file__).parent / "fixtures"
BUNDLED_CATALOG = FIXTURE_DIR / "catalog.toml"


class RuntimeKind(str, Enum):
    OLLAMA_NATIVE = "ollama_native"
    HAILO_OLLAMA = "hailo_ollama"
    STACKFLOW_STUB = "stackflow_stub"
    MOCK = "mock"


@dataclass(frozen=True)
class DeviceProfile:
    id: str
    name: str
    width_mm: float
    depth_mm: float
    height_mm: float
    price_usd: float = 0.0
    cpu_desc: str = ""
    accelerator_desc: str | None = None
    accelerator_tops: float | None = None
    nominal_power_range_w: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        for name in ("width_mm", "depth_mm", "height_mm"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"device {self.id!r}: {name} must be > 0, got {getattr(self, name)!r}")
        if self.price_usd < 0:
            raise ValidationError(f"device {self.id!r}: price_usd must be >= 0")
        if self.accelerator_tops is not None and self.accelerator_tops < 0:
            raise ValidationError(f"device {self.id!r}: accelerator_tops must be >= 0")
        rng = self.nominal_power_range_w
        if rng is not None:
            if len(rng) != 2:
                raise ValidationError(f"device {self.id!r}: nominal_power_range_w must be [low, high]")
            lo, hi = float(rng[0]), float(rng[1])
            if not (0 < lo <= hi):
                raise ValidationError(
                    f"device {self.id!r}: nominal_power_range_w needs 0 < low <= high, got {list(rng)}"
                )
            object.__setattr__(self, "nominal_power_range_w", (lo, hi))

    @property
    def volume_m3(self) -> float:
        return volume_m3(self)

    @property
    def volume_cm3(self) -> float:
        return volume_m3(self) * 1e6

    @property
    def nominal_power_w(self) -> float | None:
        """Midpoint of the nominal power range."""
        if self.nominal_power_range_w is None:
            return None
        lo, hi = self.nominal_power_range_w
        return (lo + hi) / 2


@dataclass(frozen=True)
class ModelSpec:
    id: str
    family: str
    param_count_b: float
    quantisation: str = Q4_K_M
    runtime_model_ids: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.param_count_b > 0:
            raise ValidationError(f"model {self.id!r}: param_count_b must be > 0")
        if not self.runtime_model_ids:
            raise ValidationError(f"model {self.id!r}: runtime_model_ids must not be empty")
        known = {k.value for k in RuntimeKind}
        for kind in self.runtime_model_ids:
            if kind not in known:
                raise ValidationError(f"model {self.id!r}: runtime_model_ids has unknown runtime {kind!r}")
        object.__setattr__(self, "runtime_model_ids", dict(self.runtime_model_ids))

    def runtime_id(self, kind: RuntimeKind | str) -> str | None:
        return self.runtime_model_ids.get(RuntimeKind(kind).value)

    @property
    def size_label(self) -> str:
        return f"{self.param_count_b:g}B"


@dataclass(frozen=True)
class Catalog:
    devices: tuple[DeviceProfile, ...] = ()
    models: tuple[ModelSpec, ...] = ()

    def device(self, device_id: str) -> DeviceProfile:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise KeyError(device_id)

    def model(self, model_id: str) -> ModelSpec:
        for m in self.models:
            if m.id == model_id:
                return m
        raise KeyError(model_id)

    def __iter__(self):
        # allows ``devices, models = load_catalog(path)``
        return iter((self.devices, self.models))


def volume_m3(d: DeviceProfile) -> float:
    return d.width_mm * d.depth_mm * d.height_mm * 1e-9


_DEVICE_FIELDS = (
    "id", "name", "width_mm", "depth_mm", "height_mm", "price_usd", "cpu_desc",
    "accelerator_desc", "accelerator_tops", "nominal_power_range_w",
)
_MODEL_FIELDS = ("id", "family", "param_count_b", "quantisation", "runtime_model_ids")
_REQUIRED = {
    "device": ("id", "name", "width_mm", "depth_mm", "height_mm"),
    "model": ("id", "family", "param_count_b", "runtime_model_ids"),
}


def _build(kind: str, index: int, table: Any, allowed: Sequence[str], cls: type) -> Any:
    where = f"{kind}[{index}]"
    if not isinstance(table, dict):
        raise ValidationError(f"{where}: expected a table")
    unknown = set(table) - set(allowed)
    if unknown:
        raise ValidationError(f"{where}: unknown field(s) {sorted(unknown)}")
    for name in _REQUIRED[kind]:
        if name not in table:
            raise ValidationError(f"{where}: missing required field {name!r}")
    kwargs = dict(table)
    if "nominal_power_range_w" in kwargs:
        kwargs["nominal_power_range_w"] = tuple(kwargs["nominal_power_range_w"])
    try:
        return cls(**kwargs)
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
    except TypeError as exc:
        raise ValidationError(f"{where}: {exc}") from None


def parse_catalog(data: Mapping[str, Any]) -> Catalog:
    """Validate an already-decoded TOML document."""
    raw_devices = data.get("device", [])
    raw_models = data.get("model", [])
    devices = [_build("device", i, t, _DEVICE_FIELDS, DeviceProfile) for i, t in enumerate(raw_devices)]
    models = [_build("model", i, t, _MODEL_FIELDS, ModelSpec) for i, t in enumerate(raw_models)]
    for kind, items in (("device", devices), ("model", models)):
        seen: set[str] = set()
        for item in items:
            if item.id in seen:
                raise ValidationError(f"{kind}.id: duplicate id {item.id!r}")
            seen.add(item.id)
    return Catalog(tuple(devices), tuple(models))


def load_toml(path: str | Path) -> dict[str, Any]:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        # message already carries "(at line N, column M)"
        raise CatalogParseError(f"{path}: {exc}") from None


def load_catalog(path: str | Path = BUNDLED_CATALOG) -> Catalog:
    return parse_catalog(load_toml(path))


def _device_table(d: DeviceProfile) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for name in _DEVICE_FIELDS:
        value = getattr(d, name)
        if value is None:
            continue
        out[name] = list(value) if isinstance(value, tuple) else value
    return out


def _model_table(m: ModelSpec) -> dict[str, Any]:
    return {
        "id": m.id,
        "family": m.family,
        "param_count_b": m.param_count_b,
        "quantisation": m.quantisation,
        "runtime_model_ids": dict(m.runtime_model_ids),
    }


def dumps_catalog(catalog: Catalog) -> str:
    doc: dict[str, Any] = {}
    if catalog.devices:
        doc["device"] = [_device_table(d) for d in catalog.devices]
    if catalog.models:
        doc["model"] = [_model_table(m) for m in catalog.models]
    return tomli_w.dumps(doc)


def save_catalog(catalog: Catalog, path: str | Path) -> None:
    Path(path).write_text(dumps_catalog(catalog), encoding="utf-8")
