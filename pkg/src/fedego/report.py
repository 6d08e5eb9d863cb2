"""Experiment reports and their on-disk form (JSON + CSV)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

# per-client metric rows written to metrics.csv: (split, metric) pairs
METRIC_KINDS = (
    ("local_test", "micro_f1"),
    ("local_test", "macro_f1"),
    ("local_val", "micro_f1"),
    ("global_test", "micro_f1"),
    ("global_test", "macro_f1"),
)


@dataclass
class RoundReport:
    round: int
    strategy: str
    clients: list[dict]
    global_f1: float | None
    local_f1: float | None
    bytes: dict[str, int]
    server_global_f1: float | None = None
    server_loss: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentReport:
    config: dict
    seed: int
    initial: dict
    rounds: list[RoundReport] = field(default_factory=list)
    final: dict = field(default_factory=dict)
    best_val: dict = field(default_factory=dict)
    # kept in memory only: exported artifacts must be reproducible byte for byte
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "seed": self.seed,
            "initial": self.initial,
            "rounds": [r.to_dict() for r in self.rounds],
            "final": self.final,
            "best_val": self.best_val,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentReport:
        rounds = [RoundReport(**r) for r in doc.get("rounds", [])]
        return cls(doc["config"], doc["seed"], doc.get("initial", {}), rounds, doc.get("final", {}),
                   doc.get("best_val", {}))


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


def metrics_rows(report: ExperimentReport):
    for rnd in report.rounds:
        for client in rnd.clients:
            for split, metric in METRIC_KINDS:
                yield rnd.round, client["client_id"], split, metric, client[split][metric]
        if rnd.server_global_f1 is not None:
            yield rnd.round, -1, "global_test", "micro_f1", rnd.server_global_f1


def divergence_rows(report: ExperimentReport):
    for rnd in report.rounds:
        for client in rnd.clients:
            if client.get("wd_relative") is None:
                continue
            yield (rnd.round, client["client_id"], client["lambda"], client["emd"],
                   client["wd_relative"], client["wd_absolute"])


def _csv(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def export_report(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """Write ``report.json``, ``metrics.csv`` and ``divergence.csv`` into ``out_dir``.

    In ``metrics.csv`` a client id of -1 marks the server model on the global test.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror or exc}") from exc
    paths = [out / "report.json", out / "metrics.csv", out / "divergence.csv"]
    _write(paths[0], dumps(report.to_dict()))
    _write(paths[1], _csv(("round", "client_id", "split", "metric", "value"), metrics_rows(report)))
    _write(paths[2], _csv(("round", "client_id", "lambda", "emd", "wd_relative", "wd_absolute"),
                          divergence_rows(report)))
    return paths


def write_divergence_table(rows: list[dict], path: str | Path) -> Path:
    """γ-probe output: one row per (gamma, seed, client)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ("gamma", "seed", "client_id", "lambda", "emd", "wd_relative", "wd_absolute")
    _write(path, _csv(header, ([r[h] for h in header] for r in rows)))
    return path
