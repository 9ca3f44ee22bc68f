"""On-disk result store.

Layout under the store root::

    runs.ndjson          one RunRecord per line, append-only
    energy.ndjson        energy attached to runs after the fact (last wins)
    aggregates.json      {"metadata": {...}, "aggregates": [...]}
    exports/*.csv        figure datasets (plus *.notes.txt for exclusions)
    fixtures/table3.csv  persisted golden fixture, when saved
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Mapping

from . import __version__
from .bench import AggregateResult, RunRecord, aggregate_runs
from .energy import EnergyResult
from .errors import ValidationError

log = logging.getLogger(__name__)

RUNS_FILE = "runs.ndjson"
ENERGY_FILE = "energy.ndjson"
AGGREGATES_FILE = "aggregates.json"
EXPORTS_DIR = "exports"
FIXTURES_DIR = "fixtures"
STORE_ENV = "EDGEBENCH_STORE"


@dataclass(frozen=True)
class Diagnostic:
    path: Path
    lineno: int
    message: str

    def __str__(self) -> str:
        return f"{self.path}:{self.lineno}: {self.message}"


def config_hash(config: Mapping[str, Any]) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class ResultStore:
    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self._lock = threading.Lock()

    @classmethod
    def from_env(cls, explicit: str | Path | None = None) -> ResultStore:
        """``explicit`` if given, else ``$EDGEBENCH_STORE``."""
        root = explicit or os.environ.get(STORE_ENV)
        if root is None:
            raise ValidationError(f"no store given (use --store or set {STORE_ENV})")
        return cls(root)

    @property
    def runs_path(self) -> Path:
        return self.root / RUNS_FILE

    @property
    def energy_path(self) -> Path:
        return self.root / ENERGY_FILE

    @property
    def aggregates_path(self) -> Path:
        return self.root / AGGREGATES_FILE

    @property
    def exports_dir(self) -> Path:
        return self.root / EXPORTS_DIR

    @property
    def fixtures_dir(self) -> Path:
        return self.root / FIXTURES_DIR

    def init(self) -> ResultStore:
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    # runs

    def persist_run(self, run: RunRecord) -> None:
        line = json.dumps(run.to_dict(), separators=(",", ":")) + "\n"
        self.init()
        with self._lock:
            # one write per record: readers see whole records or nothing
            with self.runs_path.open("a", encoding="utf-8") as fh:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())

    def persist_runs(self, runs: Iterable[RunRecord]) -> None:
        for r in runs:
            self.persist_run(r)

    def read_runs(self) -> tuple[list[RunRecord], list[Diagnostic]]:
        """Load every readable run; bad lines become diagnostics."""
        runs: list[RunRecord] = []
        diags: list[Diagnostic] = []
        if not self.runs_path.exists():
            return runs, diags
        with self.runs_path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    runs.append(RunRecord.from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    partial = "" if line.endswith("\n") else " (truncated final line)"
                    diags.append(Diagnostic(self.runs_path, lineno, f"unreadable run record{partial}: {exc}"))
        energy = self._energy_by_run(diags)
        for r in runs:
            if r.run_id in energy:
                r.energy = energy[r.run_id]
        for d in diags:
            log.warning("%s", d)
        return runs, diags

    def load_runs(self) -> list[RunRecord]:
        return self.read_runs()[0]

    # aggregates

    def save_aggregates(self, aggregates: Iterable[AggregateResult], metadata: Mapping[str, Any] | None = None) -> None:
        self.init()
        now = datetime.now(timezone.utc).isoformat()
        previous = self.load_metadata()
        meta = {
            "artifact_version": __version__,
            "created_utc": previous.get("created_utc", now),
            "updated_utc": now,
            **(metadata or {}),
        }
        doc = {"metadata": meta, "aggregates": [a.to_dict() for a in aggregates]}
        tmp = self.aggregates_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, self.aggregates_path)

    def _read_doc(self) -> dict[str, Any]:
        if not self.aggregates_path.exists():
            return {}
        try:
            return json.loads(self.aggregates_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{self.aggregates_path}: {exc}") from None

    def load_aggregates(self) -> list[AggregateResult]:
        return [AggregateResult.from_dict(d) for d in self._read_doc().get("aggregates", [])]

    def load_metadata(self) -> dict[str, Any]:
        return dict(self._read_doc().get("metadata", {}))

    def recompute_aggregates(self) -> list[AggregateResult]:
        """Aggregates rebuilt from the persisted runs, keyed like the stored ones."""
        stored = {a.key: a for a in self.load_aggregates()}
        out = []
        for agg in aggregate_runs(self.load_runs()):
            prev = stored.get(agg.key)
            if prev is not None:
                agg.warmup_runs = prev.warmup_runs
                agg.concurrency = prev.concurrency
                if prev.warmup_runs == 0 and "no warmup" not in agg.note:
                    agg.note = "; ".join(filter(None, [agg.note, "no warmup"]))
            out.append(agg)
        return out

    # energy attachments; runs.ndjson itself is never rewritten

    def persist_energy(self, run: RunRecord, energy: EnergyResult) -> None:
        line = json.dumps({"run_id": run.run_id, "energy": energy.to_dict()}, separators=(",", ":")) + "\n"
        self.init()
        with self._lock:
            with self.energy_path.open("a", encoding="utf-8") as fh:
                fh.write(line)

    def _energy_by_run(self, diags: list[Diagnostic]) -> dict[str, EnergyResult]:
        out: dict[str, EnergyResult] = {}
        if not self.energy_path.exists():
            return out
        with self.energy_path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    out[d["run_id"]] = EnergyResult.from_dict(d["energy"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    diags.append(Diagnostic(self.energy_path, lineno, f"unreadable energy record: {exc}"))
        return out
