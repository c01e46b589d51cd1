"""Objectives, optimizer and the two per-period training procedures.

``train_full`` fits a fresh model on one period.  ``train_continual``
transfers a model from the previous period: it scores surviving nodes,
selects rehearsal buffers, assembles the subgraph to retrain on and fits the
copied parameters with the Huber loss plus an elastic weight consolidation
penalty anchored at the previous parameters.
"""

from __future__ import annotations

import csv
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .continual import (
    DEFAULT_BINS,
    DEFAULT_BUFFER_FRACTION,
    STEPS_PER_DAY,
    RehearsalBuffers,
    assemble_training_set,
    buffer_capacity,
    score_nodes,
    select_buffers,
)
from .data import SeriesTensor, channel_stats, make_windows, normalize, split_bounds
from .errors import (
    ConfigError,
    EmptyFisherData,
    EmptyTrainingSet,
    ParameterMismatch,
    ShapeError,
)
from .graph import GraphSnapshot, RescaledLaplacian, compute_delta, laplacian_for
from .model import CastModel


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 15
    ewc_lambda: float = 1e-4
    huber_delta: float = 1.0
    seed: int = 0
    stride: int = 1
    epsilon: float = 0.1  # adjacency threshold

    def __post_init__(self):
        if self.learning_rate <= 0 or self.huber_delta <= 0:
            raise ConfigError("learning_rate and huber_delta must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.stride < 1:
            raise ConfigError("batch_size, max_epochs and stride must be >= 1")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience must be in [0, max_epochs], got {self.patience}")
        if self.ewc_lambda < 0:
            raise ConfigError("ewc_lambda must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d, "train")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ContinualConfig:
    """``tau=None`` means seven days of steps, capped at the training split."""

    tau: int | None = None
    bins: int = DEFAULT_BINS
    consolidation_fraction: float = DEFAULT_BUFFER_FRACTION
    update_fraction: float = DEFAULT_BUFFER_FRACTION
    fisher_samples: int = 32
    steps_per_day: int = STEPS_PER_DAY

    def __post_init__(self):
        if self.tau is not None and self.tau < 1:
            raise ConfigError("tau must be >= 1")
        if self.bins < 1 or self.fisher_samples < 1 or self.steps_per_day < 1:
            raise ConfigError("bins, fisher_samples and steps_per_day must be >= 1")
        for name in ("consolidation_fraction", "update_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "ContinualConfig":
        return _from_dict(cls, d, "continual")

    def to_dict(self) -> dict:
        return asdict(self)


def _from_dict(cls, d, section):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown [{section}] keys: {sorted(unknown)}")
    return cls(**d)


# objectives

def huber_loss(pred, truth, delta: float = 1.0) -> Tensor:
    pred = ad.as_tensor(pred)
    truth = ad.as_tensor(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} does not match target shape {truth.shape}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    return ad.mean(ad.huber(pred - truth, delta))


@dataclass
class FisherState:
    importance: dict  # name -> non-negative array
    reference: dict   # name -> parameters at the previous period


def _params(model) -> dict:
    return model.named_parameters()


def compute_fisher(model, samples, loss_fn) -> FisherState:
    """Diagonal empirical Fisher: per-parameter mean of squared per-sample
    gradients of ``loss_fn(model, sample)``."""
    params = _params(model)
    acc = {k: np.zeros_like(p.data) for k, p in params.items()}
    count = 0
    for sample in samples:
        for p in params.values():
            p.grad = None
        loss = loss_fn(model, sample)
        loss.backward()
        for k, p in params.items():
            if p.grad is not None:
                acc[k] += p.grad**2
        count += 1
    for p in params.values():
        p.grad = None
    if count == 0:
        raise EmptyFisherData("no samples to estimate the Fisher information from")
    return FisherState(
        {k: v / count for k, v in acc.items()},
        {k: p.data.copy() for k, p in params.items()},
    )


def _check_alignment(params: dict, fisher: FisherState) -> None:
    if set(params) != set(fisher.importance) or set(params) != set(fisher.reference):
        diff = sorted(set(params) ^ set(fisher.importance))
        raise ParameterMismatch(f"Fisher state does not match model parameters: {diff[:5]}")
    for k, p in params.items():
        if fisher.importance[k].shape != p.shape or fisher.reference[k].shape != p.shape:
            raise ParameterMismatch(f"{k}: shape {p.shape} does not match the Fisher state")


def ewc_penalty(model, fisher: FisherState) -> Tensor:
    params = _params(model)
    _check_alignment(params, fisher)
    total = None
    for k in sorted(params):
        drift = params[k] - Tensor(fisher.reference[k])
        term = ad.sum_(ad.hadamard(Tensor(fisher.importance[k]), ad.hadamard(drift, drift)))
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def overall_loss(pred, truth, model=None, fisher: FisherState | None = None,
                 lam: float = 0.0, delta: float = 1.0) -> Tensor:
    main = huber_loss(pred, truth, delta)
    if fisher is None or lam == 0:
        return main
    return main + ad.scale(ewc_penalty(model, fisher), lam)


# optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; missing grads count as zero."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(k, np.zeros_like(p.data))
        v = state.v.get(k, np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# data plumbing

@dataclass
class PeriodData:
    """One period prepared for training: normalized series, its Laplacian and
    chronological window splits."""

    snapshot: GraphSnapshot
    raw: SeriesTensor
    series: SeriesTensor
    laplacian: RescaledLaplacian
    train_end: int
    val_end: int
    train: tuple
    val: tuple
    test: tuple


def prepare_period(snapshot: GraphSnapshot, raw: SeriesTensor, history: int, horizon: int,
                   stride: int = 1, epsilon: float = 0.1) -> PeriodData:
    if tuple(raw.nodes) != tuple(snapshot.nodes):
        raise ShapeError("series node order does not match the snapshot")
    train_end, val_end = split_bounds(raw.num_steps)
    series = normalize(raw, channel_stats(raw, train_end))
    lap = laplacian_for(snapshot, epsilon)
    train = make_windows(series, history, horizon, stride, 0, train_end)
    val = make_windows(series, history, horizon, stride, train_end, val_end)
    test = make_windows(series, history, horizon, stride, val_end, raw.num_steps)
    return PeriodData(snapshot, raw, series, lap, train_end, val_end, train, val, test)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float
    nodes: int


@dataclass
class TrainResult:
    model: CastModel
    history: list
    best_epoch: int
    no_improvement: bool = False
    noop: bool = False
    buffers: RehearsalBuffers | None = None
    subgraph: GraphSnapshot | None = None
    fisher: FisherState | None = None
    fisher_seconds: float = 0.0
    tau: int | None = None

    @property
    def epochs(self) -> int:
        return max(0, len(self.history) - 1)

    @property
    def train_seconds(self) -> float:
        return sum(r.wall_seconds for r in self.history) + self.fisher_seconds

    @property
    def per_epoch_seconds(self) -> float:
        timed = [r.wall_seconds for r in self.history[1:]]
        return float(np.mean(timed)) if timed else 0.0

    @property
    def trained_node_counts(self) -> set:
        return {r.nodes for r in self.history[1:]}


def evaluate_loss(model: CastModel, laplacian, inputs, targets, delta: float,
                  batch_size: int = 64) -> float:
    """Mean Huber loss over all windows, evaluated in batches."""
    total, count = 0.0, 0
    with ad.no_grad():
        for s in range(0, len(inputs), batch_size):
            x, y = inputs[s:s + batch_size], targets[s:s + batch_size]
            pred = model.forward(x, laplacian)
            total += float(huber_loss(pred, y, delta).data) * y.size
            count += y.size
    return total / count


def _fit(model: CastModel, laplacian, epoch_data, val, cfg: TrainConfig,
         fisher: FisherState | None = None) -> TrainResult:
    """Shared loop.  ``epoch_data(rng)`` returns the training windows for one
    epoch; the epoch-0 row holds losses of the untrained parameters."""
    rng = np.random.default_rng(cfg.seed)
    lam = cfg.ewc_lambda if fisher is not None else 0.0
    opt = Adam(model.named_parameters(), cfg.learning_rate)

    x0, y0 = epoch_data(np.random.default_rng(cfg.seed))
    history = [EpochRecord(
        0,
        evaluate_loss(model, laplacian, x0, y0, cfg.huber_delta, cfg.batch_size),
        evaluate_loss(model, laplacian, *val, cfg.huber_delta, cfg.batch_size),
        0.0,
        x0.shape[1],
    )]
    best_val, best_epoch, best_state = history[0].val_loss, 0, model.state_dict()
    since_best = 0
    for epoch in range(1, cfg.max_epochs + 1):
        tic = time.perf_counter()
        inputs, targets = epoch_data(rng)
        order = rng.permutation(len(inputs))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            opt.zero_grad()
            pred = model.forward(inputs[idx], laplacian)
            loss = overall_loss(pred, targets[idx], model, fisher, lam, cfg.huber_delta)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        val_loss = evaluate_loss(model, laplacian, *val, cfg.huber_delta, cfg.batch_size)
        history.append(EpochRecord(epoch, float(np.mean(losses)), val_loss,
                                   time.perf_counter() - tic, inputs.shape[1]))
        if val_loss < best_val:
            best_val, best_epoch, best_state = val_loss, epoch, model.state_dict()
            since_best = 0
        else:
            since_best += 1
        if since_best >= cfg.patience:
            break
    model.load_state_dict(best_state)
    no_improvement = best_epoch == 0
    if no_improvement:
        warnings.warn("validation loss never improved on the initial parameters", RuntimeWarning,
                      stacklevel=3)
    return TrainResult(model, history, best_epoch, no_improvement)


def train_full(model: CastModel, period: PeriodData, cfg: TrainConfig) -> TrainResult:
    """Fit ``model`` (modified in place) on one period's training windows,
    early-stopping on its validation windows."""
    train = period.train
    return _fit(model, period.laplacian, lambda rng: train, period.val, cfg)


def _resolve_tau(ccfg: ContinualConfig, prev: PeriodData, nxt: PeriodData) -> int:
    if ccfg.tau is not None:
        return ccfg.tau
    return min(7 * ccfg.steps_per_day, prev.train_end, nxt.train_end)


def _fisher_samples(period: PeriodData, count: int):
    inputs, targets = period.train
    if len(inputs) == 0:
        raise EmptyFisherData("previous period has no training windows")
    idx = np.unique(np.linspace(0, len(inputs) - 1, min(count, len(inputs))).round().astype(int))
    return [(inputs[i:i + 1], targets[i:i + 1]) for i in idx]


def train_continual(model_prev: CastModel, prev: PeriodData, nxt: PeriodData, cfg: TrainConfig,
                    ccfg: ContinualConfig = ContinualConfig()) -> TrainResult:
    """Transfer ``model_prev`` to the next period, retraining only on the
    added, affected and buffered nodes.  ``model_prev`` is left untouched."""
    mcfg = model_prev.config
    delta = compute_delta(prev.snapshot, nxt.snapshot)
    tau = _resolve_tau(ccfg, prev, nxt)
    scores = score_nodes(prev.raw.steps(0, prev.train_end), nxt.raw.steps(0, nxt.train_end),
                         tau, ccfg.bins)
    cap_c = buffer_capacity(ccfg.consolidation_fraction, len(scores))
    cap_u = buffer_capacity(ccfg.update_fraction, len(scores))
    if cap_c + cap_u > len(scores):
        cap_u = len(scores) - cap_c
    buffers = select_buffers(scores, cap_c, cap_u)
    buffers.attach_rehearsal(prev.series.steps(0, prev.train_end), tau)
    try:
        sub = assemble_training_set(delta, buffers, nxt.snapshot)
    except EmptyTrainingSet:
        return TrainResult(model_prev.copy(), [], 0, noop=True, buffers=buffers, tau=tau)

    tic = time.perf_counter()
    delta_h = cfg.huber_delta
    fisher = compute_fisher(
        model_prev,
        _fisher_samples(prev, ccfg.fisher_samples),
        lambda m, s: huber_loss(m.forward(s[0], prev.laplacian), s[1], delta_h),
    )
    fisher_seconds = time.perf_counter() - tic

    lap = laplacian_for(sub, cfg.epsilon)
    span = mcfg.history + mcfg.horizon
    sub_series = nxt.series.select(sub.nodes)
    train_x, train_y = make_windows(sub_series, mcfg.history, mcfg.horizon, cfg.stride, 0, nxt.train_end)
    val = make_windows(sub_series, mcfg.history, mcfg.horizon, cfg.stride, nxt.train_end, nxt.val_end)

    rows = [sub.index(n) for n in buffers.consolidation_nodes]
    if rows and tau < span:
        raise EmptyTrainingSet(f"rehearsal windows of {tau} steps are shorter than {span}")
    rehearsal = None
    if rows:
        stored = np.stack([buffers.rehearsal[n] for n in buffers.consolidation_nodes])  # [C, F, tau]
        rehearsal = make_windows(stored, mcfg.history, mcfg.horizon, 1)

    def epoch_data(rng):
        if rehearsal is None:
            return train_x, train_y
        x, y = train_x.copy(), train_y.copy()
        pick = rng.integers(0, len(rehearsal[0]), size=len(x))
        x[:, rows] = rehearsal[0][pick]
        y[:, rows] = rehearsal[1][pick]
        return x, y

    model = model_prev.copy()
    result = _fit(model, lap, epoch_data, val, cfg, fisher)
    result.buffers = buffers
    result.subgraph = sub
    result.fisher = fisher
    result.fisher_seconds = fisher_seconds
    result.tau = tau
    return result


def parameter_drift(a: CastModel, b: CastModel) -> float:
    """Euclidean distance between two models' flattened parameters."""
    pa, pb = a.named_parameters(), b.named_parameters()
    if set(pa) != set(pb):
        raise ParameterMismatch("models have different parameter names")
    return math.sqrt(sum(float(np.sum((pa[k].data - pb[k].data) ** 2)) for k in pa))


def write_history(path, history: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "wall_seconds"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), f"{r.wall_seconds:.6f}"])
