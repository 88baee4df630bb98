"""Run summaries, convergence detection and on-disk formats."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from numba import njit

METRIC_NAMES = ("mean_q", "mean_c", "mean_o", "mean_u", "mean_tau")
SERIES_COLUMNS = METRIC_NAMES + ("wins", "sup_dv")
SWEEP_COLUMNS = ("param", "mean_q", "mean_c", "mean_o", "mean_u", "std_u")


@njit(cache=True)
def _fleet_means(q, c, o, u, tau):
    out = np.zeros(5)
    n = q.shape[0]
    for k in range(n):
        out[0] += q[k]
        out[1] += c[k]
        out[2] += o[k]
        out[3] += u[k]
        out[4] += tau[k]
    return out / n


@dataclass(frozen=True)
class SlotMetrics:
    slot: int
    q: np.ndarray
    c: np.ndarray
    o: np.ndarray
    u: np.ndarray
    tau: np.ndarray
    theta: np.ndarray

    def mean_vector(self) -> np.ndarray:
        """Fleet means in ``METRIC_NAMES`` order."""
        return _fleet_means(self.q, self.c, self.o, self.u, self.tau)

    @property
    def means(self) -> dict[str, float]:
        return dict(zip(METRIC_NAMES, map(float, self.mean_vector())))


def sup_changes(history) -> np.ndarray:
    """Largest absolute entry change between consecutive snapshots.

    ``history`` is a sequence of equally shaped tables (one per slot,
    optionally stacked over agents); element ``t`` of the result is the
    change from snapshot ``t`` to ``t + 1``.
    """
    h = np.asarray(history, dtype=float)
    if len(h) == 0:
        raise ValueError("empty history")
    diffs = np.abs(np.diff(h, axis=0))
    return diffs.reshape(len(diffs), -1).max(axis=1) if diffs.size else np.zeros(0)


def first_quiet_slot(changes, eps: float, window: int):
    """First snapshot index ``t >= window`` whose preceding ``window`` changes are all below ``eps``."""
    ch = np.asarray(changes, dtype=float)
    if len(ch) < window:
        return None
    loud = (ch >= eps).astype(np.int64)
    # loud changes within each trailing window
    csum = np.concatenate([[0], np.cumsum(loud)])
    counts = csum[window:] - csum[:-window]
    quiet = np.flatnonzero(counts == 0)
    return int(quiet[0]) + window if len(quiet) else None


def detect_convergence(history, eps: float, window: int):
    """Slot at which value tables have stopped moving, or ``None`` if never.

    ``history`` holds one value-table snapshot per slot starting with the
    initial tables.
    """
    return first_quiet_slot(sup_changes(history), eps, window)


@dataclass
class RunSummary:
    config: dict[str, Any]
    seed: int
    policy: str
    series: dict[str, np.ndarray]
    v_trace: np.ndarray            # value table of agent 0 after each slot (OE runs)
    averages: dict[str, float]
    convergence_slot: int | None
    empirical_return: float | None
    queue_distribution: np.ndarray
    extra: dict[str, Any] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, RunSummary):
            return NotImplemented
        return (self.aggregates() == other.aggregates()
                and self.series.keys() == other.series.keys()
                and all(np.array_equal(self.series[k], other.series[k]) for k in self.series)
                and np.array_equal(self.v_trace, other.v_trace))

    def aggregates(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "seed": self.seed,
            "policy": self.policy,
            "averages": self.averages,
            "convergence_slot": self.convergence_slot,
            "empirical_return": self.empirical_return,
            "queue_distribution": [float(x) for x in self.queue_distribution],
            "extra": self.extra,
        }


def _series_csv(summary: RunSummary) -> str:
    buf = io.StringIO()
    vcols = [f"v0_{i}" for i in range(summary.v_trace.shape[1])] if summary.v_trace.size else []
    buf.write(",".join(("slot",) + SERIES_COLUMNS + tuple(vcols)) + "\n")
    n = len(summary.series["mean_q"])
    cols = [summary.series[c] for c in SERIES_COLUMNS]
    for t in range(n):
        row = [str(t)] + [repr(float(c[t])) for c in cols]
        if vcols:
            row += [repr(float(x)) for x in summary.v_trace[t]]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def export(summary: RunSummary, path, fmt: str = "both") -> list[Path]:
    """Write ``series.csv`` (one row per slot) and/or ``summary.json`` under ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt in ("both", "csv"):
        p = out / "series.csv"
        p.write_text(_series_csv(summary))
        written.append(p)
    if fmt in ("both", "json"):
        p = out / "summary.json"
        p.write_text(json.dumps(summary.aggregates(), indent=2, sort_keys=True) + "\n")
        written.append(p)
    return written


def load(path) -> RunSummary:
    """Inverse of :func:`export` with ``fmt="both"``."""
    root = Path(path)
    agg = json.loads((root / "summary.json").read_text())
    with open(root / "series.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    data = np.array([[float(x) for x in r] for r in rows]) if rows else np.zeros((0, len(header)))
    series = {c: data[:, header.index(c)] for c in SERIES_COLUMNS}
    vcols = [i for i, h in enumerate(header) if h.startswith("v0_")]
    v_trace = data[:, vcols] if vcols else np.zeros((0, 0))
    return RunSummary(
        config=agg["config"], seed=agg["seed"], policy=agg["policy"], series=series,
        v_trace=v_trace, averages=agg["averages"], convergence_slot=agg["convergence_slot"],
        empirical_return=agg["empirical_return"],
        queue_distribution=np.array(agg["queue_distribution"]), extra=agg["extra"])


def write_sweep(rows, path) -> Path:
    """Write one aggregate row per swept value."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(SWEEP_COLUMNS)]
    for r in rows:
        lines.append(",".join(repr(float(r[c])) if c != "param" else str(r[c]) for c in SWEEP_COLUMNS))
    p.write_text("\n".join(lines) + "\n")
    return p
