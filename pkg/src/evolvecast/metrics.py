"""Forecast error metrics and the per-period report written by the CLI."""

from __future__ import annotations

import contextlib
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, MissingArtifact, ShapeError, UndefinedMetric

HORIZON_STEPS = (3, 6, 12)
STEP_MINUTES = 5
MAPE_FLOOR = 1e-6


@contextlib.contextmanager
def _sink(target):
    """Yield a text handle for a path or pass an open stream through."""
    if hasattr(target, "write"):
        yield target
        return
    path = Path(target)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        yield fh


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match truth shape {truth.shape}")
    if pred.size == 0:
        raise UndefinedMetric("no values to score")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape(pred, truth) -> float:
    """Mean absolute percentage error in percent; near-zero truths are skipped."""
    pred, truth = _pair(pred, truth)
    keep = np.abs(truth) >= MAPE_FLOOR
    if not keep.any():
        raise UndefinedMetric("every truth value is below the MAPE floor")
    return float(np.mean(np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep])) * 100.0)


def horizon_metrics(pred, truth, horizons=HORIZON_STEPS) -> dict[int, tuple[float, float, float]]:
    """Metrics at individual forecast steps of ``[..., H]`` arrays (1-based steps)."""
    pred, truth = _pair(pred, truth)
    out = {}
    for h in horizons:
        if h <= pred.shape[-1]:
            p, t = pred[..., h - 1], truth[..., h - 1]
            try:
                mp = mape(p, t)
            except UndefinedMetric:
                mp = float("nan")
            out[h] = (mae(p, t), rmse(p, t), mp)
    return out


COLUMNS = ["period", "subset", "horizon", "minutes", "mae", "rmse", "mape",
           "epochs", "nodes", "train_seconds", "per_epoch_seconds"]
TIMING_COLUMNS = ("train_seconds", "per_epoch_seconds")


@dataclass
class MetricRow:
    period: int
    subset: str  # all | stable | unstable
    horizon: int
    mae: float
    rmse: float
    mape: float
    epochs: int = 0
    nodes: int = 0
    train_seconds: float = 0.0
    per_epoch_seconds: float = 0.0

    @property
    def minutes(self) -> int:
        return self.horizon * STEP_MINUTES


@dataclass
class MetricReport:
    scenario: str
    rows: list = field(default_factory=list)

    def add_period(self, period, pred, truth, subset="all", epochs=0, nodes=0,
                   train_seconds=0.0, per_epoch_seconds=0.0, horizons=HORIZON_STEPS):
        for h, (a, r, m) in horizon_metrics(pred, truth, horizons).items():
            self.rows.append(MetricRow(period, subset, h, a, r, m, epochs, nodes,
                                       train_seconds, per_epoch_seconds))

    def select(self, period=None, subset="all", horizon=None) -> list:
        return [r for r in self.rows
                if (period is None or r.period == period)
                and (subset is None or r.subset == subset)
                and (horizon is None or r.horizon == horizon)]

    @property
    def final_period(self) -> int:
        return max(r.period for r in self.rows)

    def total_train_seconds(self) -> float:
        seen = {}
        for r in self.select(subset="all"):
            seen[r.period] = r.train_seconds
        return float(sum(seen.values()))

    def write(self, target) -> None:
        with _sink(target) as fh:
            fh.write(f"# scenario={self.scenario}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([r.period, r.subset, r.horizon, r.minutes, repr(r.mae), repr(r.rmse),
                            repr(r.mape), r.epochs, r.nodes, f"{r.train_seconds:.6f}",
                            f"{r.per_epoch_seconds:.6f}"])

    @classmethod
    def read(cls, path) -> "MetricReport":
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(path)
        lines = path.read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("# scenario="):
            raise FormatError(f"{path}: missing scenario line", 1)
        report = cls(lines[0].split("=", 1)[1])
        reader = csv.reader(lines[1:])
        header = next(reader, None)
        if header != COLUMNS:
            raise FormatError(f"{path}: unexpected header", 2)
        for lineno, row in enumerate(reader, start=3):
            if len(row) != len(COLUMNS):
                raise FormatError(f"{path}: expected {len(COLUMNS)} fields", lineno)
            try:
                report.rows.append(MetricRow(
                    int(row[0]), row[1], int(row[2]), float(row[4]), float(row[5]),
                    float(row[6]), int(row[7]), int(row[8]), float(row[9]), float(row[10]),
                ))
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}", lineno) from None
        return report


# long-format prediction files: window,node_id,step,value

def write_predictions(target, values: np.ndarray, nodes, channel: int = 0) -> None:
    """``values[W, N, p, H]``; only ``channel`` is written."""
    values = np.asarray(values)
    W, N, _, H = values.shape
    with _sink(target) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "node_id", "step", "value"])
        for i in range(W):
            for j, n in enumerate(nodes):
                for h in range(H):
                    w.writerow([i, n, h + 1, repr(float(values[i, j, channel, h]))])


def read_predictions(path) -> tuple[np.ndarray, list]:
    """Returns ``values[W, N, 1, H]`` and the node order."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["window", "node_id", "step", "value"]:
        raise FormatError(f"{path}: expected header window,node_id,step,value", 1)
    entries = []
    for lineno, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        if len(r) != 4:
            raise FormatError(f"{path}: expected 4 fields", lineno)
        try:
            entries.append((int(r[0]), int(r[1]), int(r[2]), float(r[3])))
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}", lineno) from None
    windows = sorted({e[0] for e in entries})
    nodes = sorted({e[1] for e in entries})
    steps = sorted({e[2] for e in entries})
    if len(entries) != len(windows) * len(nodes) * len(steps):
        raise FormatError(f"{path}: entries do not form a complete window x node x step grid")
    wi = {w: i for i, w in enumerate(windows)}
    ni = {n: i for i, n in enumerate(nodes)}
    si = {s: i for i, s in enumerate(steps)}
    out = np.full((len(windows), len(nodes), 1, len(steps)), np.nan)
    for w, n, s, v in entries:
        out[wi[w], ni[n], 0, si[s]] = v
    if np.isnan(out).any():
        raise FormatError(f"{path}: duplicate entries")
    return out, nodes
