"""Period loop for the two evaluation scenarios.

``full``: a fresh model is trained on every period.  ``continual``: period 1
is trained from scratch and each later period transfers the previous model
through :func:`train_continual`.  Every period is scored on the test windows
of its complete graph after mapping predictions back to raw units.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .continual import write_buffer_manifest
from .data import denormalize_values
from .metrics import MetricReport
from .model import CastConfig, CastModel
from .training import (
    ContinualConfig,
    PeriodData,
    TrainConfig,
    TrainResult,
    prepare_period,
    train_continual,
    train_full,
    write_history,
)

log = logging.getLogger("evolvecast")

SCENARIOS = ("full", "continual")


@dataclass
class ScenarioRun:
    report: MetricReport
    results: dict = field(default_factory=dict)  # period -> TrainResult
    models: dict = field(default_factory=dict)   # period -> CastModel
    buffers: dict = field(default_factory=dict)  # period -> RehearsalBuffers


def predict_windows(model: CastModel, period: PeriodData, inputs, batch_size: int = 64) -> np.ndarray:
    """Predictions in raw units for ``inputs[W, N, F, P]`` on the period's full graph."""
    outs = [model.predict(inputs[s:s + batch_size], period.laplacian)
            for s in range(0, len(inputs), batch_size)]
    pred = np.concatenate(outs) if outs else np.zeros((0,))
    return denormalize_values(pred, period.series.mean, period.series.std)


def score_period(report: MetricReport, model: CastModel, period: PeriodData, result: TrainResult,
                 buffers=None, batch_size: int = 64) -> None:
    inputs, targets = period.test
    pred = predict_windows(model, period, inputs, batch_size)
    truth = denormalize_values(targets, period.series.mean, period.series.std)
    nodes = result.subgraph.num_nodes if result.subgraph is not None else period.snapshot.num_nodes
    if result.noop:
        nodes = 0
    timing = dict(epochs=result.epochs, nodes=nodes, train_seconds=result.train_seconds,
                  per_epoch_seconds=result.per_epoch_seconds)
    k = period.snapshot.period
    report.add_period(k, pred, truth, "all", **timing)
    if buffers is not None:
        for subset, members in (("stable", buffers.consolidation_nodes), ("unstable", buffers.update_nodes)):
            rows = [period.snapshot.index(n) for n in members]
            if rows:
                report.add_period(k, pred[:, rows], truth[:, rows], subset, **timing)


def run_scenario(pairs, scenario: str, model_cfg: CastConfig, train_cfg: TrainConfig,
                 cont_cfg: ContinualConfig = ContinualConfig(), seed: int = 0,
                 out_dir=None) -> ScenarioRun:
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    periods = [prepare_period(s, x, model_cfg.history, model_cfg.horizon, train_cfg.stride, train_cfg.epsilon)
               for s, x in pairs]
    run = ScenarioRun(MetricReport(scenario))
    out_dir = Path(out_dir) if out_dir is not None else None
    previous = None
    for i, period in enumerate(periods):
        k = period.snapshot.period
        if scenario == "full" or previous is None:
            model = CastModel(model_cfg, seed)
            result = train_full(model, period, train_cfg)
            buffers = None
        else:
            result = train_continual(previous, periods[i - 1], period, train_cfg, cont_cfg)
            model = result.model
            buffers = result.buffers
            run.buffers[k] = buffers
        log.info("period %d: %d epochs, best %d, %.2fs%s", k, result.epochs, result.best_epoch,
                 result.train_seconds, " (no-op)" if result.noop else "")
        score_period(run.report, model, period, result, buffers, train_cfg.batch_size)
        run.results[k] = result
        run.models[k] = model
        previous = model
        if out_dir is not None:
            pdir = out_dir / f"period_{k}"
            pdir.mkdir(parents=True, exist_ok=True)
            meta = {"model": model_cfg.to_dict(), "period": k, "epsilon": train_cfg.epsilon,
                    "stride": train_cfg.stride, "scenario": scenario}
            ad.save_checkpoint(pdir / "checkpoint.txt", model.named_parameters(), meta)
            write_history(pdir / "history.csv", result.history)
    if out_dir is not None:
        run.report.write(out_dir / "report.csv")
        if run.buffers:
            write_buffer_manifest(out_dir / "buffers.txt", run.buffers)
    return run
