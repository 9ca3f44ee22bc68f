import csv
import io
import json
import threading

import pytest

from edgebench.acceptance import synthetic_runs
from edgebench.bench import UNSUPPORTED, AggregateResult, aggregate_runs
from edgebench.energy import constant_power
from edgebench.errors import ValidationError
from edgebench.report import (
    GOLDEN_RENDER,
    Figure,
    export_figure_data,
    load_golden,
    normalize_whitespace,
    render_table,
    save_golden,
)
from edgebench.store import ResultStore


@pytest.fixture
def store(tmp_path):
    return ResultStore(tmp_path / "store").init()


def rows_of(csv_text):
    return list(csv.DictReader(io.StringIO(csv_text)))


def test_round_trip_five_runs(store):
    runs = [r for r in synthetic_runs() if r.config_id == "rpi5" and r.model_id == "deepseek-r1-1.5b"]
    assert len(runs) == 5
    store.persist_runs(runs)
    assert [r.to_dict() for r in store.load_runs()] == [r.to_dict() for r in runs]
    store.save_aggregates(aggregate_runs(runs), {"suite": "unit"})
    assert [a.to_dict() for a in store.recompute_aggregates()] == [a.to_dict() for a in store.load_aggregates()]
    meta = store.load_metadata()
    assert meta["suite"] == "unit" and "artifact_version" in meta and "created_utc" in meta


def test_created_timestamp_survives_resave(store):
    store.save_aggregates([])
    created = store.load_metadata()["created_utc"]
    store.save_aggregates([])
    assert store.load_metadata()["created_utc"] == created


def test_truncated_final_line(store):
    runs = synthetic_runs()[:5]
    store.persist_runs(runs)
    text = store.runs_path.read_text()
    store.runs_path.write_text(text[: len(text) - 40])
    loaded, diags = store.read_runs()
    assert len(loaded) == 4
    assert len(diags) == 1
    assert diags[0].lineno == 5 and "truncated" in diags[0].message


def test_concurrent_reader_sees_prefix(store):
    runs = synthetic_runs()
    stop = threading.Event()
    seen = []

    def reader():
        while not stop.is_set():
            loaded, diags = store.read_runs()
            seen.append((len(loaded), len(diags)))
            ids = [r.run_id for r in loaded]
            assert ids == [r.run_id for r in runs[: len(ids)]]

    t = threading.Thread(target=reader)
    t.start()
    try:
        store.persist_runs(runs)
    finally:
        stop.set()
        t.join()
    assert all(d == 0 for _, d in seen)
    assert len(store.load_runs()) == len(runs)


def test_energy_attachment_is_append_only(store):
    run = synthetic_runs()[1]
    assert run.energy is None
    store.persist_run(run)
    before = store.runs_path.read_bytes()
    store.persist_energy(run, constant_power(5.0, run.elapsed_s))
    store.persist_energy(run, constant_power(7.0, run.elapsed_s))
    assert store.runs_path.read_bytes() == before
    (loaded,) = store.load_runs()
    assert loaded.energy.mean_power_w == 7.0


def test_from_env(monkeypatch, tmp_path):
    monkeypatch.setenv("EDGEBENCH_STORE", str(tmp_path / "env"))
    assert ResultStore.from_env().root == tmp_path / "env"
    assert ResultStore.from_env(tmp_path / "flag").root == tmp_path / "flag"
    monkeypatch.delenv("EDGEBENCH_STORE")
    with pytest.raises(ValidationError):
        ResultStore.from_env()


def test_corrupt_aggregates_is_validation_error(store):
    store.aggregates_path.write_text("{nope")
    with pytest.raises(ValidationError):
        store.load_aggregates()


# rendering


def test_golden_render_matches_checked_in(golden, catalog):
    assert normalize_whitespace(render_table(golden, catalog=catalog)) == normalize_whitespace(
        GOLDEN_RENDER.read_text())


def test_golden_persist_and_rerender(tmp_path, golden, catalog):
    save_golden(golden, tmp_path / "t.csv")
    again = load_golden(tmp_path / "t.csv")
    assert again == golden
    assert render_table(again, catalog=catalog) == render_table(golden, catalog=catalog)


def test_rendered_values_equal_published(golden, catalog):
    text = render_table(golden, catalog=catalog)
    lines = text.splitlines()
    header = lines[0].split()
    configs = header[3:]
    assert configs == ["m5stack-llm", "rpi5", "rpi5-hat", "jetson-cpu", "jetson-gpu"]
    tp_line = next(line for line in lines if line.startswith("deepseek-r1-1.5b"))
    assert tp_line.split()[-5:] == ["2.42", "0.32", "1.53", "6.01", "9.59"]
    assert text.count("--") >= 14
    assert "(reported)" in text


def test_empty_results_header_only():
    text = render_table([])
    assert text.splitlines()[0].split() == ["Model", "Size", "Metric"]
    assert len(text.strip().splitlines()) == 2


def test_single_cell_render():
    agg = aggregate_runs(synthetic_runs()[:5])[0]
    text = render_table([agg])
    lines = [line for line in text.splitlines() if line.strip()]
    assert lines[0].split()[-1] == "rpi5"
    metric_lines = lines[2:5]
    assert [line.split("  ")[0].strip() or "" for line in metric_lines][0] == "deepseek-r1-1.5b"
    assert "Time-to-first-token (s)" in text


def test_unsupported_aggregate_renders_dash():
    agg = AggregateResult("rpi5-hat", "rpi5-hat", "llama3.2-1b", "hailo_ollama", 0, status=UNSUPPORTED,
                          note="model not found")
    text = render_table([agg])
    assert text.count("--") >= 3
    assert "rpi5-hat/llama3.2-1b: model not found" in text


def test_render_is_deterministic(golden, catalog):
    assert render_table(golden, catalog=catalog) == render_table(load_golden(), catalog=catalog)


# exports


def test_bubble_export(golden, catalog):
    data = export_figure_data(golden, Figure.POWER_VS_THROUGHPUT_BUBBLE, catalog)
    rows = rows_of(data.csv_text)
    assert len(rows) == 35 - 6
    m5 = next(r for r in rows if r["config"] == "m5stack-llm" and r["model"] == "deepseek-r1-1.5b")
    assert float(m5["power_w"]) == pytest.approx(1.38, abs=0.01)
    assert float(m5["throughput_tps"]) == 2.42
    assert float(m5["volume_cm3"]) == pytest.approx(37.9, abs=0.05)
    assert m5["power_source"] == "implied"


def test_bubble_prefers_measured_power(catalog):
    aggs = aggregate_runs(synthetic_runs())
    rows = rows_of(export_figure_data(aggs, "power_vs_throughput_bubble", catalog).csv_text)
    assert len(rows) == 4
    for row, agg in zip(rows, aggs):
        assert row["power_source"] == "measured"
        assert float(row["power_w"]) == pytest.approx(agg.power_w.mean)


def test_bubble_without_volume_excludes_rather_than_imputes():
    data = export_figure_data(aggregate_runs(synthetic_runs()), "power_vs_throughput_bubble", None)
    assert rows_of(data.csv_text) == []
    assert len(data.exclusions) == 4 and all("volume" in e for e in data.exclusions)


def test_density_surface(golden, catalog):
    data = export_figure_data(golden, Figure.DENSITY_SURFACE, catalog, models=["llama3.2-1b"])
    (row,) = rows_of(data.csv_text)
    assert float(row["m5stack-llm"]) == pytest.approx(3.44 / 3.7908e-5, rel=1e-9)
    assert row["rpi5-hat"] == ""
    assert any("rpi5-hat/llama3.2-1b" in e for e in data.exclusions)


def test_surface_default_is_shared_models(golden, catalog):
    data = export_figure_data(golden, Figure.ENERGY_SURFACE, catalog)
    assert [r["model"] for r in rows_of(data.csv_text)] == ["deepseek-r1-1.5b", "qwen2.5-instruct-1.5b"]
    assert any(e.startswith("llama3.2-1b:") for e in data.exclusions)


def test_empty_export_is_header_only():
    for fig in Figure:
        text = export_figure_data([], fig).csv_text
        assert len(text.strip().splitlines()) == 1


def test_export_write(tmp_path, golden, catalog):
    data = export_figure_data(golden, Figure.THROUGHPUT_SURFACE, catalog)
    path = data.write(tmp_path)
    assert path.read_text() == data.csv_text
    assert (tmp_path / "throughput_surface.notes.txt").exists()
    json.dumps(data.exclusions)
