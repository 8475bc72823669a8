"""Per-sample metric rows, aggregate summaries and report comparison.

A report is a directory holding ``rows.tsv`` (one line per sample, in sample
order) and ``summary.json`` (aggregates, config echo, seed, wall clock).
Aggregates are plain means of the row columns, so they can always be
recomputed from the rows; :func:`load_report` does exactly that and refuses
reports whose stored aggregates disagree.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .skeleton import H36M, bone_lengths, mpjpe, pa_mpjpe, pck_auc, per_joint_error

__all__ = [
    "Report",
    "ReportError",
    "pose_metrics",
    "build_rows",
    "aggregate",
    "write_report",
    "load_report",
    "compare_reports",
    "format_table",
    "bone_length_deviation",
]

ROWS_FILE = "rows.tsv"
SUMMARY_FILE = "summary.json"
AUDIT_TOL = 1e-9


class ReportError(ValueError):
    pass


def pose_metrics(pred, gt, prefix: str = "") -> dict:
    pck, auc = pck_auc([pred], [gt])
    return {
        prefix + "mpjpe": mpjpe(pred, gt),
        prefix + "pa_mpjpe": pa_mpjpe(pred, gt),
        prefix + "pck": pck,
        prefix + "auc": auc,
    }


def bone_length_deviation(pose, lengths) -> float:
    """Mean relative deviation of the 16 bone lengths from ``lengths``."""
    ref = np.asarray(lengths, dtype=np.float64)
    return float(np.mean(np.abs(bone_lengths(pose) - ref) / ref))


def build_rows(task: str, samples, preds, *, metrics=("mpjpe", "pa_mpjpe", "pck", "auc")) -> list[dict]:
    """Rows for solved task samples: after-metrics, init ("before") metrics,
    and for completion the error over the masked joints only."""
    rows = []
    for s, pred in zip(samples, preds):
        gt = s.ground_truth
        row = {"index": s.index, "id": s.record_id}
        after = pose_metrics(pred, gt)
        init = s.problem.init
        before = pose_metrics(init, gt, "before_") if init is not None else {}
        for m in metrics:
            row[m] = after[m]
            if before:
                row["before_" + m] = before["before_" + m]
        if task == "complete":
            hidden = ~s.problem.measurement.mask[0]
            row["masked_mpjpe"] = float(per_joint_error(pred, gt)[hidden].mean())
            if init is not None:
                row["before_masked_mpjpe"] = float(per_joint_error(init, gt)[hidden].mean())
        rows.append(row)
    return rows


def aggregate(rows: list[dict]) -> dict:
    if not rows:
        return {"n": 0}
    keys = [k for k in rows[0] if k not in ("index", "id")]
    out = {"n": len(rows)}
    for k in keys:
        out[k] = float(np.mean([float(r[k]) for r in rows]))
    if "mpjpe" in out and "before_mpjpe" in out:
        out["improved_fraction"] = float(np.mean([r["mpjpe"] < r["before_mpjpe"] for r in rows]))
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class Report:
    rows: list
    summary: dict = field(default_factory=dict)
    path: Path | None = None

    @property
    def aggregates(self) -> dict:
        return self.summary.get("aggregates", {})

    @property
    def columns(self) -> list:
        return list(self.rows[0]) if self.rows else []


def write_report(out_dir, rows: list[dict], meta: dict) -> Report:
    """Write rows and summary; ``meta`` lands in the summary next to the aggregates."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = list(rows[0]) if rows else ["index"]
    with open(out / ROWS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])
    summary = {"aggregates": aggregate(rows), "topology": H36M.name, "columns": cols, **meta}
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return Report(rows, summary, out)


def _parse(v: str):
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def load_report(path) -> Report:
    """Read a report directory (or its ``rows.tsv``) and audit its aggregates."""
    p = Path(path)
    d = p.parent if p.is_file() else p
    rows_path, sum_path = d / ROWS_FILE, d / SUMMARY_FILE
    if not rows_path.is_file() or not sum_path.is_file():
        raise ReportError(f"{d}: not a report directory (needs {ROWS_FILE} and {SUMMARY_FILE})")
    with open(rows_path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            raise ReportError(f"{rows_path}: empty file")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise ReportError(f"{rows_path}: line {lineno} has {len(rec)} fields, expected {len(header)}")
            rows.append({h: (v if h == "id" else _parse(v)) for h, v in zip(header, rec)})
    summary = json.loads(sum_path.read_text())
    stored = summary.get("aggregates", {})
    fresh = aggregate(rows)
    for k, v in fresh.items():
        if k not in stored or not math.isclose(v, stored[k], rel_tol=AUDIT_TOL, abs_tol=AUDIT_TOL):
            raise ReportError(f"{d}: stored aggregate {k}={stored.get(k)!r} disagrees with rows ({v!r})")
    return Report(rows, summary, d)


def compare_reports(reports: list[Report]) -> tuple[list[str], list[list]]:
    """Comparison table: one row per metric, one column per report, plus a
    delta column (each report minus the first) when there are several."""
    if not reports:
        raise ReportError("no reports to compare")
    topo = {r.summary.get("topology") for r in reports}
    if len(topo) != 1:
        raise ReportError(f"reports use different topologies: {sorted(map(str, topo))}")
    cols0 = set(reports[0].aggregates)
    for r in reports[1:]:
        if set(r.aggregates) != cols0:
            raise ReportError(
                f"schema mismatch: {r.path} has metrics {sorted(r.aggregates)}, "
                f"expected {sorted(cols0)}"
            )
    names = [str(r.path.name if r.path else i) for i, r in enumerate(reports)]
    header = ["metric"] + names
    if len(reports) > 1:
        header += [f"delta_{n}" for n in names[1:]]
    table = []
    for k in sorted(cols0):
        vals = [r.aggregates[k] for r in reports]
        row = [k] + vals
        if len(reports) > 1:
            row += [v - vals[0] for v in vals[1:]]
        table.append(row)
    return header, table


def format_table(header, table) -> str:
    cells = [header] + [[c if isinstance(c, str) else f"{c:.4f}" for c in row] for row in table]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    return "\n".join(lines) + "\n"
