"""Rehearsal machinery: per-node histograms over trailing windows, EMD
stability scores, consolidation/update buffer selection and assembly of the
node set a transferred model is retrained on."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SeriesTensor
from .errors import (
    BinMismatch,
    CapacityError,
    EmptyTrainingSet,
    EmptyWindow,
    FormatError,
    InsufficientHistory,
    MissingArtifact,
    UnknownNode,
)
from .graph import GraphDelta, GraphSnapshot, induced_subgraph

DEFAULT_BINS = 20
DEFAULT_BUFFER_FRACTION = 0.15
STEPS_PER_DAY = 288


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    mass: np.ndarray

    @property
    def bins(self) -> int:
        return len(self.mass)

    @property
    def width(self) -> float:
        return float(self.edges[1] - self.edges[0])

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])


def build_histogram(series, bins: int = DEFAULT_BINS, value_range=None) -> Histogram:
    """Equal-width histogram over ``value_range``; out-of-range values are clamped
    into the edge bins and the upper edge belongs to the last bin."""
    x = np.asarray(series, dtype=np.float64).ravel()
    if x.size == 0:
        raise EmptyWindow("cannot build a histogram from an empty window")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    lo, hi = (float(x.min()), float(x.max())) if value_range is None else map(float, value_range)
    if not lo < hi:
        raise ValueError(f"histogram range needs lo < hi, got ({lo}, {hi})")
    edges = np.linspace(lo, hi, bins + 1)
    idx = np.floor((np.clip(x, lo, hi) - lo) / (hi - lo) * bins).astype(np.int64)
    idx = np.minimum(idx, bins - 1)
    mass = np.bincount(idx, minlength=bins) / x.size
    return Histogram(edges, mass)


def emd(h1: Histogram, h2: Histogram) -> float:
    """Earth mover's distance between histograms on the same bins.

    In 1D with ground cost ``|c_i - c_j|`` the optimal plan moves mass
    monotonically, so the cost is the L1 distance between the CDFs times the
    bin width.
    """
    if h1.edges.shape != h2.edges.shape or not np.array_equal(h1.edges, h2.edges):
        raise BinMismatch("histograms must share identical bin edges")
    return float(emd_batch(h1.mass, h2.mass, h1.width))


def emd_batch(mass1, mass2, width: float = 1.0) -> np.ndarray:
    """Closed-form EMD over the last axis of broadcastable mass arrays."""
    m1, m2 = np.broadcast_arrays(np.asarray(mass1, dtype=np.float64), np.asarray(mass2, dtype=np.float64))
    cdf_gap = np.cumsum(m1 - m2, axis=-1)[..., :-1]
    return np.abs(cdf_gap).sum(axis=-1) * width


def _feature0_window(series: SeriesTensor, tau: int) -> np.ndarray:
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    if tau > series.num_steps:
        raise InsufficientHistory(f"tau={tau} exceeds the {series.num_steps} available steps")
    return series.values[:, 0, -tau:]


def score_nodes(data_prev: SeriesTensor, data_next: SeriesTensor, tau: int,
                bins: int = DEFAULT_BINS) -> dict[int, float]:
    """EMD per node present in both periods, on feature 0 over the last
    ``tau`` steps of each series.

    Both windows of a node are binned over the ``[min, max]`` of their union;
    a node constant across both windows scores 0.
    """
    prev_w = _feature0_window(data_prev, tau)
    next_w = _feature0_window(data_next, tau)
    prev_idx = {n: i for i, n in enumerate(data_prev.nodes)}
    next_idx = {n: i for i, n in enumerate(data_next.nodes)}
    scores = {}
    for n in sorted(prev_idx.keys() & next_idx.keys()):
        a, b = prev_w[prev_idx[n]], next_w[next_idx[n]]
        lo = min(a.min(), b.min())
        hi = max(a.max(), b.max())
        if lo == hi:
            scores[n] = 0.0
            continue
        scores[n] = emd(build_histogram(a, bins, (lo, hi)), build_histogram(b, bins, (lo, hi)))
    return scores


@dataclass
class RehearsalBuffers:
    """``consolidation`` holds the most stable nodes, ``update`` the most
    changed; both are ``(node, score)`` lists in ascending score order.
    ``rehearsal`` maps consolidation nodes to their stored windows."""

    consolidation: list
    update: list
    capacity_c: int
    capacity_u: int
    rehearsal: dict = field(default_factory=dict)

    @property
    def consolidation_nodes(self) -> list[int]:
        return [n for n, _ in self.consolidation]

    @property
    def update_nodes(self) -> list[int]:
        return [n for n, _ in self.update]

    def attach_rehearsal(self, series: SeriesTensor, tau: int) -> None:
        """Store the last ``tau`` steps (all features) of every consolidation node."""
        if tau > series.num_steps:
            raise InsufficientHistory(f"tau={tau} exceeds the {series.num_steps} available steps")
        index = {n: i for i, n in enumerate(series.nodes)}
        self.rehearsal = {n: series.values[index[n], :, -tau:].copy() for n in self.consolidation_nodes}


def buffer_capacity(fraction: float, n: int) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise CapacityError(f"buffer fraction must be in [0, 1], got {fraction}")
    return int(round(fraction * n))


def select_buffers(scores: dict, capacity_c: int, capacity_u: int) -> RehearsalBuffers:
    if capacity_c < 0 or capacity_u < 0:
        raise CapacityError("capacities must be non-negative")
    if capacity_c + capacity_u > len(scores):
        raise CapacityError(
            f"capacities {capacity_c} + {capacity_u} exceed the {len(scores)} scored nodes"
        )
    ranked = sorted(scores.items(), key=lambda kv: (kv[1], kv[0]))
    consolidation = ranked[:capacity_c]
    update = ranked[len(ranked) - capacity_u:] if capacity_u else []
    return RehearsalBuffers(consolidation, update, capacity_c, capacity_u)


def random_buffers(nodes, capacity_c: int, capacity_u: int, seed: int = 0) -> RehearsalBuffers:
    """Uniform random selection; a baseline for comparing against EMD scoring."""
    nodes = sorted(nodes)
    if capacity_c + capacity_u > len(nodes):
        raise CapacityError(f"capacities exceed the {len(nodes)} candidate nodes")
    picked = np.random.default_rng(seed).permutation(nodes)[: capacity_c + capacity_u].tolist()
    return RehearsalBuffers(
        [(n, float("nan")) for n in picked[:capacity_c]],
        [(n, float("nan")) for n in picked[capacity_c:]],
        capacity_c,
        capacity_u,
    )


def assemble_training_set(delta: GraphDelta, buffers: RehearsalBuffers, g_next: GraphSnapshot) -> GraphSnapshot:
    """Induced subgraph of ``g_next`` over the added and affected nodes plus
    both buffers."""
    buffered = set(buffers.consolidation_nodes) | set(buffers.update_nodes)
    missing = buffered - g_next.node_set
    if missing:
        raise UnknownNode(f"buffer nodes {sorted(missing)} are not in period {g_next.period}")
    keep = ((delta.added_nodes | delta.affected_nodes) & g_next.node_set) | buffered
    if not keep:
        raise EmptyTrainingSet("no added, affected or buffered nodes to train on")
    return induced_subgraph(g_next, keep)


# manifest

MANIFEST_HEADER = "# evolvecast buffer manifest v1"


def write_buffer_manifest(path, buffers_by_period: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period", "buffer", "node_id", "score"])
        for period in sorted(buffers_by_period):
            buf = buffers_by_period[period]
            for kind, items in (("consolidation", buf.consolidation), ("update", buf.update)):
                for n, s in items:
                    w.writerow([period, kind, n, repr(float(s))])


def read_buffer_manifest(path) -> dict:
    """Inverse of :func:`write_buffer_manifest`; capacities are the list sizes."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FormatError(f"{path}: not a buffer manifest", 1)
    out: dict = {}
    for lineno, row in enumerate(csv.reader(lines[2:]), start=3):
        if not row:
            continue
        if len(row) != 4 or row[1] not in ("consolidation", "update"):
            raise FormatError(f"{path}: malformed row", lineno)
        period = int(row[0])
        entry = out.setdefault(period, ([], []))
        (entry[0] if row[1] == "consolidation" else entry[1]).append((int(row[2]), float(row[3])))
    return {k: RehearsalBuffers(c, u, len(c), len(u)) for k, (c, u) in out.items()}
