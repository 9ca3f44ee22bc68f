"""Golden fixture, text tables and figure-ready CSV exports."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

from .bench import AggregateResult
from .catalog import FIXTURE_DIR, Catalog
from .energy import implied_power_w
from .errors import ValidationError
from .metrics import MetricVector, throughput_density

GOLDEN_TABLE = FIXTURE_DIR / "table3.csv"
GOLDEN_RENDER = FIXTURE_DIR / "table3.txt"

GOLDEN_COLUMNS = (
    "config_id", "device_id", "runtime_kind", "model_id", "supported",
    "throughput_tps", "ttft_reported", "ttft_unit_ambiguous", "mj_per_mtok",
)

UNSUPPORTED_MARK = "--"


@dataclass(frozen=True)
class GoldenCell:
    """One configuration x model cell of the published results table.

    ``ttft_reported`` is kept exactly as printed: the source labels it in
    milliseconds but the magnitudes only make sense as seconds.
    """

    config_id: str
    device_id: str
    runtime_kind: str
    model_id: str
    supported: bool
    throughput_tps: float | None = None
    ttft_reported: float | None = None
    mj_per_mtok: float | None = None
    ttft_unit_ambiguous: bool = True


@dataclass(frozen=True)
class GoldenFixture:
    cells: tuple[GoldenCell, ...]

    @property
    def config_ids(self) -> list[str]:
        return list(dict.fromkeys(c.config_id for c in self.cells))

    @property
    def model_ids(self) -> list[str]:
        return list(dict.fromkeys(c.model_id for c in self.cells))

    def cell(self, config_id: str, model_id: str) -> GoldenCell:
        for c in self.cells:
            if c.config_id == config_id and c.model_id == model_id:
                return c
        raise KeyError((config_id, model_id))

    def supported(self) -> list[GoldenCell]:
        return [c for c in self.cells if c.supported]


def _opt_float(s: str) -> float | None:
    s = s.strip()
    return float(s) if s else None


def _parse_bool(s: str, where: str) -> bool:
    v = s.strip().lower()
    if v not in ("true", "false"):
        raise ValidationError(f"{where}: expected true/false, got {s!r}")
    return v == "true"


def load_golden(path: str | Path = GOLDEN_TABLE) -> GoldenFixture:
    path = Path(path)
    cells = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != GOLDEN_COLUMNS:
            raise ValidationError(f"{path}:1: unexpected columns {reader.fieldnames}")
        for lineno, row in enumerate(reader, start=2):
            where = f"{path}:{lineno}"
            try:
                cell = GoldenCell(
                    config_id=row["config_id"],
                    device_id=row["device_id"],
                    runtime_kind=row["runtime_kind"],
                    model_id=row["model_id"],
                    supported=_parse_bool(row["supported"], where),
                    throughput_tps=_opt_float(row["throughput_tps"]),
                    ttft_reported=_opt_float(row["ttft_reported"]),
                    mj_per_mtok=_opt_float(row["mj_per_mtok"]),
                    ttft_unit_ambiguous=_parse_bool(row["ttft_unit_ambiguous"], where),
                )
            except ValueError as exc:
                raise ValidationError(f"{where}: {exc}") from None
            if cell.supported and None in (cell.throughput_tps, cell.ttft_reported, cell.mj_per_mtok):
                raise ValidationError(f"{where}: supported cell is missing a value")
            cells.append(cell)
    return GoldenFixture(tuple(cells))


def _fmt_csv(v: float | None) -> str:
    return "" if v is None else repr(v)


def save_golden(fixture: GoldenFixture, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GOLDEN_COLUMNS)
        for c in fixture.cells:
            w.writerow([
                c.config_id, c.device_id, c.runtime_kind, c.model_id, str(c.supported).lower(),
                _fmt_csv(c.throughput_tps), _fmt_csv(c.ttft_reported),
                str(c.ttft_unit_ambiguous).lower(), _fmt_csv(c.mj_per_mtok),
            ])


@dataclass(frozen=True)
class Row:
    """Source-neutral view of one result cell used by renders and exports."""

    config_id: str
    device_id: str
    model_id: str
    supported: bool
    throughput_tps: float | None
    ttft: float | None
    mj_per_mtok: float | None
    power_w: float | None = None
    ttft_ambiguous: bool = False
    note: str = ""


def to_rows(results: Iterable[AggregateResult | GoldenCell] | GoldenFixture) -> list[Row]:
    if isinstance(results, GoldenFixture):
        results = results.cells
    rows = []
    for r in results:
        if isinstance(r, GoldenCell):
            rows.append(Row(r.config_id, r.device_id, r.model_id, r.supported, r.throughput_tps,
                            r.ttft_reported, r.mj_per_mtok, None, r.ttft_unit_ambiguous))
        else:
            ok = r.supported
            rows.append(Row(
                r.config_id, r.device_id, r.model_id, ok,
                r.throughput_tps.mean if ok and r.throughput_tps else None,
                r.ttft_s.mean if ok and r.ttft_s else None,
                r.energy_mj_per_mtok.mean if ok and r.energy_mj_per_mtok else None,
                r.power_w.mean if ok and r.power_w else None,
                note=r.note,
            ))
    return rows


class Layout(str, Enum):
    PER_MODEL_ROWS = "per_model_rows"


def _cell(v: float | None, supported: bool) -> str:
    if not supported:
        return UNSUPPORTED_MARK
    return "n/a" if v is None else f"{v:.2f}"


def render_table(
    results: Iterable[AggregateResult | GoldenCell] | GoldenFixture,
    layout: Layout = Layout.PER_MODEL_ROWS,
    catalog: Catalog | None = None,
) -> str:
    """Plain-text results table: three metric rows per model, one column per configuration."""
    if Layout(layout) is not Layout.PER_MODEL_ROWS:
        raise ValidationError(f"unsupported layout {layout!r}")
    rows = to_rows(results)
    configs = list(dict.fromkeys(r.config_id for r in rows))
    models = list(dict.fromkeys(r.model_id for r in rows))
    by_key = {(r.config_id, r.model_id): r for r in rows}
    ambiguous = any(r.ttft_ambiguous for r in rows)
    ttft_label = "Time-to-first-token (reported)" if ambiguous else "Time-to-first-token (s)"
    metrics = (
        ("Throughput (tok/s)", lambda r: r.throughput_tps),
        (ttft_label, lambda r: r.ttft),
        ("Energy (MJ/Mtok)", lambda r: r.mj_per_mtok),
    )

    def size_of(model_id: str) -> str:
        if catalog is not None:
            try:
                return catalog.model(model_id).size_label
            except KeyError:
                pass
        return ""

    table = [["Model", "Size", "Metric", *configs]]
    for m in models:
        for i, (label, get) in enumerate(metrics):
            line = [m if i == 0 else "", size_of(m) if i == 0 else "", label]
            for c in configs:
                r = by_key.get((c, m))
                line.append(UNSUPPORTED_MARK if r is None else _cell(get(r), r.supported))
            table.append(line)

    widths = [max(len(row[j]) for row in table) for j in range(len(table[0]))]
    out = []
    for k, row in enumerate(table):
        cells = [row[j].ljust(widths[j]) if j < 3 else row[j].rjust(widths[j]) for j in range(len(row))]
        out.append("  ".join(cells).rstrip())
        if k == 0:
            out.append("  ".join("-" * w for w in widths))
    if rows:
        out.append("")
        out.append(f"{UNSUPPORTED_MARK} = model not supported for configuration")
        if ambiguous:
            out.append("TTFT shown as published; source labels it ms but magnitudes are consistent with seconds")
        notes = sorted({f"{r.config_id}/{r.model_id}: {r.note}" for r in rows if r.note})
        out.extend(notes)
    return "\n".join(out) + "\n"


def normalize_whitespace(text: str) -> str:
    return "\n".join(" ".join(line.split()) for line in text.strip().splitlines())


class Figure(str, Enum):
    POWER_VS_THROUGHPUT_BUBBLE = "power_vs_throughput_bubble"
    DENSITY_SURFACE = "density_surface"
    ENERGY_SURFACE = "energy_surface"
    THROUGHPUT_SURFACE = "throughput_surface"


@dataclass(frozen=True)
class FigureData:
    figure: Figure
    csv_text: str
    exclusions: tuple[str, ...] = ()

    def write(self, exports_dir: str | Path) -> Path:
        exports_dir = Path(exports_dir)
        exports_dir.mkdir(parents=True, exist_ok=True)
        path = exports_dir / f"{self.figure.value}.csv"
        path.write_text(self.csv_text, encoding="utf-8")
        notes = exports_dir / f"{self.figure.value}.notes.txt"
        if self.exclusions:
            notes.write_text("\n".join(self.exclusions) + "\n", encoding="utf-8")
        elif notes.exists():
            notes.unlink()
        return path


def _volume_m3(catalog: Catalog | None, device_id: str) -> float | None:
    if catalog is None:
        return None
    try:
        return catalog.device(device_id).volume_m3
    except KeyError:
        return None


def row_power(row: Row, catalog: Catalog | None) -> tuple[float | None, str]:
    """Power for a row: measured, else implied by (tok/s, MJ/Mtok), else nominal."""
    if row.power_w is not None:
        return row.power_w, "measured"
    if row.throughput_tps and row.mj_per_mtok:
        return implied_power_w(row.throughput_tps, row.mj_per_mtok), "implied"
    if catalog is not None:
        try:
            nominal = catalog.device(row.device_id).nominal_power_w
        except KeyError:
            nominal = None
        if nominal is not None:
            return nominal, "nominal"
    return None, ""


def shared_models(rows: Sequence[Row]) -> list[str]:
    """Models supported on every configuration present."""
    configs = list(dict.fromkeys(r.config_id for r in rows))
    supported = {(r.config_id, r.model_id) for r in rows if r.supported}
    models = list(dict.fromkeys(r.model_id for r in rows))
    return [m for m in models if all((c, m) in supported for c in configs)]


def _csv(header: Sequence[str], body: Iterable[Sequence[object]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for line in body:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in line])
    return buf.getvalue()


def export_figure_data(
    results: Iterable[AggregateResult | GoldenCell] | GoldenFixture,
    figure: Figure | str,
    catalog: Catalog | None = None,
    models: Sequence[str] | None = None,
) -> FigureData:
    """CSV dataset for one figure.

    Surfaces default to the models supported on every configuration; pass
    ``models`` to choose the grid rows explicitly (unsupported cells are
    left empty and listed in the exclusions).
    """
    figure = Figure(figure)
    rows = to_rows(results)
    exclusions: list[str] = []

    if figure is Figure.POWER_VS_THROUGHPUT_BUBBLE:
        body = []
        for r in rows:
            if not r.supported:
                continue
            power, source = row_power(r, catalog)
            vol = _volume_m3(catalog, r.device_id)
            missing = [n for n, v in (("power_w", power), ("throughput_tps", r.throughput_tps),
                                      ("volume", vol)) if v is None]
            if missing:
                exclusions.append(f"{r.config_id}/{r.model_id}: missing {', '.join(missing)}")
                continue
            body.append((r.config_id, r.model_id, power, r.throughput_tps, vol * 1e6, source))
        text = _csv(("config", "model", "power_w", "throughput_tps", "volume_cm3", "power_source"), body)
        return FigureData(figure, text, tuple(exclusions))

    configs = list(dict.fromkeys(r.config_id for r in rows))
    if models is None:
        models = shared_models(rows)
        for m in dict.fromkeys(r.model_id for r in rows):
            if m not in models:
                exclusions.append(f"{m}: not supported on every configuration")
    by_key = {(r.config_id, r.model_id): r for r in rows}

    def value(r: Row) -> float | None:
        if figure is Figure.THROUGHPUT_SURFACE:
            return r.throughput_tps
        if figure is Figure.ENERGY_SURFACE:
            return r.mj_per_mtok
        vol = _volume_m3(catalog, r.device_id)
        if vol is None or r.throughput_tps is None:
            return None
        return throughput_density(r.throughput_tps, vol)

    body = []
    for m in models:
        line: list[object] = [m]
        for c in configs:
            r = by_key.get((c, m))
            v = value(r) if r is not None and r.supported else None
            if v is None:
                exclusions.append(f"{c}/{m}: no {figure.value.replace('_surface', '')} value")
            line.append(v)
        body.append(line)
    return FigureData(figure, _csv(("model", *configs), body), tuple(exclusions))


def metric_vectors(
    results: Iterable[AggregateResult | GoldenCell] | GoldenFixture,
    catalog: Catalog,
    runtime_kinds: dict[str, str] | None = None,
) -> list[MetricVector]:
    """Metric vectors for every supported cell (volume looked up in ``catalog``)."""
    if isinstance(results, GoldenFixture):
        results = results.cells
    results = list(results)
    kinds = runtime_kinds or {r.config_id: r.runtime_kind for r in results}
    out = []
    for r in to_rows(results):
        if not r.supported or r.throughput_tps is None:
            continue
        vol = catalog.device(r.device_id).volume_m3
        power, _ = row_power(r, None)
        out.append(MetricVector(
            config_key=(r.config_id, r.model_id, kinds.get(r.config_id, "")),
            throughput_tps=r.throughput_tps,
            ttft_s=None if r.ttft_ambiguous else r.ttft,
            volume_m3=vol,
            mj_per_mtok=r.mj_per_mtok,
            power_w=power,
        ))
    return out
