"""Metric records, per-seed metric files, and cross-seed tables."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, NonFiniteError
from .train import atomic_write

METRICS_JSON = "metrics.json"
METRICS_CSV = "metrics.csv"
_CSV_FIELDS = ["experiment", "seed", "family", "metric", "value"]


@dataclass(frozen=True)
class MetricRecord:
    experiment: str
    seed: int
    family: str
    metric: str
    value: float

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise NonFiniteError(f"{self.metric} for seed {self.seed} is not finite")


def write_metrics(seed_dir, records: list[MetricRecord], extra: dict | None = None) -> None:
    seed_dir = Path(seed_dir)
    payload = dict(extra or {})
    payload["records"] = [asdict(r) for r in records]
    atomic_write(seed_dir / METRICS_JSON, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode())
    buf = io.StringIO()
    w = csv.DictWriter(buf, _CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow(asdict(r) | {"value": repr(r.value)})
    atomic_write(seed_dir / METRICS_CSV, buf.getvalue().encode())


def read_metrics(path) -> list[MetricRecord]:
    try:
        payload = json.loads(Path(path).read_text())
        return [MetricRecord(**r) for r in payload["records"]]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed metrics file ({exc})") from exc


def collect_records(paths) -> list[MetricRecord]:
    """Records from every ``metrics.json`` at or below the given files or directories."""
    files = []
    for p in map(Path, paths):
        if p.is_file():
            files.append(p)
        elif p.is_dir():
            files.extend(sorted(p.rglob(METRICS_JSON)))
        else:
            raise FileNotFoundError(p)
    out = []
    for f in files:
        out.extend(read_metrics(f))
    return out


@dataclass(frozen=True)
class TableRow:
    experiment: str
    family: str
    metric: str
    mean: float
    std: float
    n: int


def aggregate(records: list[MetricRecord]) -> list[TableRow]:
    """Mean and sample standard deviation across seeds per (experiment, family, metric)."""
    groups: dict[tuple, dict[int, float]] = defaultdict(dict)
    for r in records:
        groups[(r.experiment, r.family, r.metric)][r.seed] = r.value
    rows = []
    for key in sorted(groups):
        vals = np.array([groups[key][s] for s in sorted(groups[key])])
        std = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        rows.append(TableRow(*key, float(vals.mean()), std, len(vals)))
    return rows


def format_table(rows: list[TableRow], fmt: str = "text") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "family", "metric", "mean", "std", "n"])
        for r in rows:
            w.writerow([r.experiment, r.family, r.metric, f"{r.mean:.2f}", f"{r.std:.2f}", r.n])
        return buf.getvalue()
    header = ["experiment", "family", "metric", "mean ± std", "n"]
    body = [[r.experiment, r.family, r.metric, f"{r.mean:.2f} ± {r.std:.2f}", str(r.n)] for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(line, widths)).rstrip() for line in [header, *body]]
    return "\n".join(lines) + "\n"
