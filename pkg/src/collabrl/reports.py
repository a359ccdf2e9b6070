"""Run reports, CSV emission and cross-seed aggregation."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .mdp import dumps

FLOAT_FMT = "%.17g"


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return FLOAT_FMT % float(x)
    return str(x)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RunReport:
    seed: int
    mode: str
    config_hash: str = ""
    phase_trajectories: dict = field(default_factory=dict)
    user_subopt: list = field(default_factory=list)
    recovery_errors: list = field(default_factory=list)  # per step, max-abs vs ground truth
    fit_residuals: list = field(default_factory=list)  # per step, max-abs on observed entries
    wall_ms: dict = field(default_factory=dict)
    status: str = "ok"
    extra: dict = field(default_factory=dict)

    @property
    def total_trajectories(self) -> int:
        return int(sum(self.phase_trajectories.values()))

    @property
    def max_subopt(self) -> float:
        return float(max(self.user_subopt)) if self.user_subopt else float("nan")

    @property
    def mean_subopt(self) -> float:
        return float(np.mean(self.user_subopt)) if self.user_subopt else float("nan")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "mode": self.mode,
            "config_hash": self.config_hash,
            "status": self.status,
            "phase_trajectories": {k: int(v) for k, v in self.phase_trajectories.items()},
            "user_subopt": [float(x) for x in self.user_subopt],
            "recovery_errors": [float(x) for x in self.recovery_errors],
            "fit_residuals": [float(x) for x in self.fit_residuals],
            "wall_ms": {k: float(v) for k, v in self.wall_ms.items()},
            "extra": _plain(self.extra),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunReport":
        return cls(doc["seed"], doc["mode"], doc.get("config_hash", ""), dict(doc["phase_trajectories"]),
                   list(doc["user_subopt"]), list(doc["recovery_errors"]), list(doc.get("fit_residuals", [])),
                   dict(doc.get("wall_ms", {})), doc.get("status", "ok"), dict(doc.get("extra", {})))

    def to_json(self) -> str:
        return dumps(self.to_dict())


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def csv_columns(horizon: int) -> list[str]:
    return (["seed", "phase", "trajectories", "max_user_subopt", "mean_user_subopt"]
            + [f"recovery_residual_h{h + 1}" for h in range(horizon)] + ["wall_ms"])


def report_rows(rep: RunReport, horizon: int) -> list[list[str]]:
    """One CSV row per phase plus a ``total`` row."""
    resid = list(rep.recovery_errors) + [float("nan")] * (horizon - len(rep.recovery_errors))
    rows = []
    phases = list(rep.phase_trajectories.items()) + [("total", rep.total_trajectories)]
    for name, count in phases:
        rows.append([fmt(rep.seed), name, fmt(int(count)), fmt(rep.max_subopt), fmt(rep.mean_subopt)]
                    + [fmt(float(x)) for x in resid[:horizon]]
                    + [fmt(float(rep.wall_ms.get(name, sum(rep.wall_ms.values()) if name == "total" else 0.0)))])
    return rows


def write_csv(path, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) if not isinstance(x, str) else x for x in row])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text


class SchemaError(ValueError):
    pass


def read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = rows[0]
    return header, [dict(zip(header, r)) for r in rows[1:]]


def aggregate(tables: list[tuple[list[str], list[dict]]]) -> tuple[list[str], list[list]]:
    """Median and quantiles per (phase, column) across run files with a shared header."""
    if not tables:
        raise SchemaError("no run files to aggregate")
    header = tables[0][0]
    for h, _ in tables[1:]:
        if h != header:
            raise SchemaError("run files have mismatched columns")
    if header[:3] != ["seed", "phase", "trajectories"]:
        raise SchemaError("not a run CSV (expected seed, phase, trajectories, ...)")
    numeric = [c for c in header if c not in ("seed", "phase")]
    by_phase: dict[str, list[dict]] = {}
    order = []
    for _, rows in tables:
        for row in rows:
            if row["phase"] not in by_phase:
                order.append(row["phase"])
            by_phase.setdefault(row["phase"], []).append(row)
    out_header = ["phase", "column", "runs", "median", "q10", "q90", "min", "max"]
    out = []
    for phase in order:
        rows = by_phase[phase]
        for col in numeric:
            try:
                vals = np.array([float(r[col]) for r in rows])
            except (KeyError, ValueError) as exc:
                raise SchemaError(f"column {col!r}: {exc}") from exc
            vals = vals[~np.isnan(vals)]
            if vals.size == 0:
                stats = [float("nan")] * 5
            else:
                stats = [float(np.median(vals)), float(np.quantile(vals, 0.1)),
                         float(np.quantile(vals, 0.9)), float(vals.min()), float(vals.max())]
            out.append([phase, col, len(rows)] + stats)
    return out_header, out


def plot_data(tables, column: str = "trajectories", phase: str = "total") -> str:
    """Two-column ``seed value`` text for gnuplot-style tools."""
    lines = [f"# seed {column} ({phase})"]
    for _, rows in tables:
        for row in rows:
            if row.get("phase") == phase and column in row:
                lines.append(f"{row['seed']} {row[column]}")
    return "\n".join(lines) + "\n"
