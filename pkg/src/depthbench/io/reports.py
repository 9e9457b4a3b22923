"""Metric report serialization (CSV + JSON) and score tables for ranking.

Payloads carry no timestamps; a run-metadata header is only attached when the
caller passes one, so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import os
from typing import TYPE_CHECKING

from ..errors import DataError, FormatError

if TYPE_CHECKING:  # pragma: no cover - typing only
    from ..metrics import MetricReport

REPORT_SCHEMA_VERSION = 1
CSV_COLUMNS = ["method", "dataset", "image_id", "delta1", "absrel", "degenerate"]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_report(report: "MetricReport", path, format: str = "json",
                 run_meta: dict | None = None) -> None:
    """Write a report as ``json`` (full fidelity) or ``csv`` (per-image rows,
    fixed column order)."""
    if format == "csv":
        tmp = f"{os.fspath(path)}.tmp"
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            writer = csv.writer(f, lineterminator="\n")
            if run_meta:
                f.write(f"# meta: {json.dumps(run_meta, sort_keys=True)}\n")
            writer.writerow(CSV_COLUMNS)
            for rec in report.per_image:
                writer.writerow([report.method, report.dataset, rec.image_id,
                                 _fmt(rec.delta1), _fmt(rec.absrel),
                                 str(rec.degenerate).lower()])
        os.replace(tmp, path)
    elif format == "json":
        doc = {
            "schema": REPORT_SCHEMA_VERSION,
            "meta": run_meta,
            "method": report.method,
            "dataset": report.dataset,
            "aggregate": {
                "delta1": report.aggregate_delta1,
                "absrel": report.aggregate_absrel,
                "images": len(report.per_image),
            },
            "per_image": [
                {"id": rec.image_id, "delta1": rec.delta1, "absrel": rec.absrel,
                 "n_valid": rec.n_valid, "degenerate": rec.degenerate,
                 "category": rec.category}
                for rec in report.per_image
            ],
        }
        tmp = f"{os.fspath(path)}.tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)
    else:
        raise DataError(f"write_report: unknown format {format!r}")


def read_report(path) -> "MetricReport":
    """Load a JSON report written by :func:`write_report`."""
    from ..metrics import ImageRecord, MetricReport

    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"report {path} is not valid JSON: {exc}") from exc
    for key in ("method", "dataset", "aggregate", "per_image"):
        if key not in doc:
            raise FormatError(f"report {path} lacks field {key!r}")
    records = [
        ImageRecord(image_id=r["id"], delta1=float(r["delta1"]),
                    absrel=float(r["absrel"]), n_valid=int(r.get("n_valid", 0)),
                    degenerate=bool(r.get("degenerate", False)),
                    category=r.get("category"))
        for r in doc["per_image"]
    ]
    return MetricReport(method=doc["method"], dataset=doc["dataset"],
                        per_image=records,
                        aggregate_delta1=float(doc["aggregate"]["delta1"]),
                        aggregate_absrel=float(doc["aggregate"]["absrel"]))


def read_scores_csv(path) -> dict[str, dict[tuple[str, str], float]]:
    """Read an aggregate score table: columns method,dataset,delta1,absrel.

    Returns the nested mapping consumed by ranking: method -> (dataset,
    metric) -> value.
    """
    scores: dict[str, dict[tuple[str, str], float]] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = [r for r in csv.reader(f) if r and not r[0].startswith("#")]
    if not rows:
        raise FormatError(f"scores table {path} is empty")
    header = [c.strip() for c in rows[0]]
    required = ["method", "dataset", "delta1", "absrel"]
    if header != required:
        raise FormatError(
            f"scores table {path} must have columns {required}, got {header}")
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise FormatError(f"scores table {path} line {i}: expected 4 cells")
        method, dataset, d1, ar = [c.strip() for c in row]
        try:
            cell = scores.setdefault(method, {})
            cell[(dataset, "delta1")] = float(d1)
            cell[(dataset, "absrel")] = float(ar)
        except ValueError as exc:
            raise FormatError(f"scores table {path} line {i}: {exc}") from exc
    return scores


def write_ranking_csv(ranking, path) -> None:
    """Write a MethodRanking as CSV: one row per method, per-column ranks and
    the average, sorted best-first."""
    order = sorted(ranking.methods, key=lambda m: (ranking.average_rank[m], m))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        cols = [f"{ds}:{metric}" for ds, metric in ranking.columns]
        writer.writerow(["method", *cols, "average_rank"])
        for m in order:
            i = ranking.methods.index(m)
            writer.writerow([m, *[_fmt(r) for r in ranking.ranks[i]],
                             _fmt(ranking.average_rank[m])])
    os.replace(tmp, path)


def write_category_stats_csv(stats, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["category", "count", "median", "q1", "q3", "iqr",
                         "whisker_lo", "whisker_hi", "outliers"])
        for s in stats:
            writer.writerow([s.category, s.count, _fmt(s.median), _fmt(s.q1),
                             _fmt(s.q3), _fmt(s.iqr), _fmt(s.whisker_lo),
                             _fmt(s.whisker_hi), ";".join(s.outlier_ids)])
    os.replace(tmp, path)
