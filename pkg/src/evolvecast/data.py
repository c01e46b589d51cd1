"""Dataset layout, normalization, sliding windows and the synthetic
evolving-network generator.

On-disk layout::

    <root>/period_<k>/nodes.csv         node_id
    <root>/period_<k>/edges.csv         src,dst,distance
    <root>/period_<k>/observations.csv  step,<node>:<feature>,...
    <root>/planted_shifts.csv           period,node_id,shift   (generator only)
"""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import (
    FormatError,
    InsufficientHistory,
    MissingArtifact,
    ScenarioError,
    ZeroVarianceWarning,
)
from .graph import GraphSnapshot

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

TRAIN_FRACTION = 0.6
VAL_FRACTION = 0.2


@dataclass(frozen=True)
class SeriesTensor:
    """Observations ``values[N, F, T]`` aligned with ``nodes``.

    ``mean``/``std`` are per-channel statistics; they are set once the
    values have been normalized and are needed to map predictions back.
    """

    nodes: tuple
    values: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 3 or values.shape[0] != len(self.nodes):
            raise FormatError(f"values must be [N, F, T] with N={len(self.nodes)}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise FormatError("observations contain NaN or Inf")
        object.__setattr__(self, "nodes", tuple(int(n) for n in self.nodes))
        object.__setattr__(self, "values", values)

    @property
    def num_steps(self) -> int:
        return self.values.shape[2]

    @property
    def num_features(self) -> int:
        return self.values.shape[1]

    @property
    def normalized(self) -> bool:
        return self.mean is not None

    def select(self, nodes) -> "SeriesTensor":
        index = {n: i for i, n in enumerate(self.nodes)}
        nodes = sorted(nodes)
        rows = [index[n] for n in nodes]
        return replace(self, nodes=tuple(nodes), values=self.values[rows])

    def steps(self, start: int, end: int) -> "SeriesTensor":
        return replace(self, values=self.values[:, :, start:end])


def split_bounds(num_steps: int) -> tuple[int, int]:
    """Chronological 60/20/20 split points ``(train_end, val_end)``."""
    return int(num_steps * TRAIN_FRACTION), int(num_steps * (TRAIN_FRACTION + VAL_FRACTION))


def channel_stats(series: SeriesTensor, end: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and std over nodes and the first ``end`` steps."""
    x = series.values[:, :, :end]
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    flat = std == 0
    if flat.any():
        warnings.warn(
            f"zero variance in channels {np.flatnonzero(flat).tolist()}; using std = 1",
            ZeroVarianceWarning,
            stacklevel=2,
        )
        std = np.where(flat, 1.0, std)
    return mean, std


def normalize(series: SeriesTensor, stats=None) -> SeriesTensor:
    if stats is None:
        stats = channel_stats(series, split_bounds(series.num_steps)[0])
    mean, std = (np.asarray(s, dtype=np.float64) for s in stats)
    values = (series.values - mean[None, :, None]) / std[None, :, None]
    return SeriesTensor(series.nodes, values, mean, std)


def denormalize_values(values: np.ndarray, mean, std, channel: int = 0) -> np.ndarray:
    return np.asarray(values) * std[channel] + mean[channel]


def denormalize(series: SeriesTensor) -> SeriesTensor:
    if not series.normalized:
        return series
    values = series.values * series.std[None, :, None] + series.mean[None, :, None]
    return SeriesTensor(series.nodes, values)


def make_windows(values: np.ndarray, history: int, horizon: int, stride: int = 1,
                 start: int = 0, end: int | None = None, target_channels=(0,)):
    """Sliding windows fully inside ``[start, end)``.

    Returns ``inputs[W, N, F, history]`` and ``targets[W, N, p, horizon]``.
    """
    values = values.values if isinstance(values, SeriesTensor) else np.asarray(values)
    end = values.shape[2] if end is None else end
    span = end - start
    if span < history + horizon:
        raise InsufficientHistory(
            f"need at least {history + horizon} steps for one window, have {span}"
        )
    starts = np.arange(start, end - history - horizon + 1, stride)
    t_in = starts[:, None] + np.arange(history)[None, :]
    t_out = starts[:, None] + history + np.arange(horizon)[None, :]
    inputs = values[:, :, t_in].transpose(2, 0, 1, 3)
    targets = values[:, list(target_channels)][:, :, t_out].transpose(2, 0, 1, 3)
    return np.ascontiguousarray(inputs), np.ascontiguousarray(targets)


# csv I/O

def _period_dirs(root: Path) -> list[tuple[int, Path]]:
    found = []
    for child in root.iterdir():
        if child.is_dir() and child.name.startswith("period_"):
            try:
                found.append((int(child.name.split("_", 1)[1]), child))
            except ValueError:
                continue
    return sorted(found)


def _read_rows(path: Path) -> list[list[str]]:
    if not path.exists():
        raise MissingArtifact(path)
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def save_period(directory, snapshot: GraphSnapshot, series: SeriesTensor) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if tuple(series.nodes) != tuple(snapshot.nodes):
        raise FormatError("series node order does not match the snapshot")
    with open(directory / "nodes.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id"])
        w.writerows([n] for n in snapshot.nodes)
    with open(directory / "edges.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src", "dst", "distance"])
        w.writerows([u, v, repr(d)] for u, v, d in snapshot.edges)
    N, F, T = series.values.shape
    header = ["step"] + [f"{n}:{f}" for n in series.nodes for f in range(F)]
    flat = series.values.reshape(N * F, T).T
    with open(directory / "observations.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t in range(T):
            w.writerow([t] + [repr(float(v)) for v in flat[t]])


def save_dataset(root, pairs) -> None:
    root = Path(root)
    for snapshot, series in pairs:
        save_period(root / f"period_{snapshot.period}", snapshot, series)


def load_period(directory, period: int) -> tuple[GraphSnapshot, SeriesTensor]:
    directory = Path(directory)
    node_rows = _read_rows(directory / "nodes.csv")
    edge_rows = _read_rows(directory / "edges.csv")
    obs_path = directory / "observations.csv"
    obs_rows = _read_rows(obs_path)

    if not node_rows or node_rows[0][:1] != ["node_id"]:
        raise FormatError(f"{directory / 'nodes.csv'}: missing node_id header", 1)
    try:
        nodes = [int(r[0]) for r in node_rows[1:] if r]
    except ValueError as exc:
        raise FormatError(f"{directory / 'nodes.csv'}: {exc}") from None
    if not edge_rows or edge_rows[0][:3] != ["src", "dst", "distance"]:
        raise FormatError(f"{directory / 'edges.csv'}: missing src,dst,distance header", 1)
    edges = []
    for lineno, r in enumerate(edge_rows[1:], start=2):
        if not r:
            continue
        if len(r) != 3:
            raise FormatError(f"{directory / 'edges.csv'}: expected 3 fields", lineno)
        try:
            edges.append((int(r[0]), int(r[1]), float(r[2])))
        except ValueError as exc:
            raise FormatError(f"{directory / 'edges.csv'}: {exc}", lineno) from None
    snapshot = GraphSnapshot(period, tuple(nodes), tuple(edges))

    if not obs_rows or not obs_rows[0] or obs_rows[0][0] != "step":
        raise FormatError(f"{obs_path}: header must start with 'step'", 1)
    columns = []
    for col in obs_rows[0][1:]:
        try:
            node, feat = col.split(":")
            columns.append((int(node), int(feat)))
        except ValueError:
            raise FormatError(f"{obs_path}: bad column name {col!r}", 1) from None
    node_set = set(snapshot.nodes)
    unknown = sorted({n for n, _ in columns} - node_set)
    if unknown:
        raise FormatError(f"{obs_path}: columns for nodes {unknown} absent from nodes.csv", 1)
    F = max(f for _, f in columns) + 1 if columns else 0
    expected = {(n, f) for n in snapshot.nodes for f in range(F)}
    if set(columns) != expected or len(columns) != len(expected):
        raise FormatError(f"{obs_path}: columns must cover every node and feature exactly once", 1)
    width = len(columns) + 1
    data = []
    for lineno, r in enumerate(obs_rows[1:], start=2):
        if len(r) != width:
            raise FormatError(f"{obs_path}: expected {width} fields, got {len(r)}", lineno)
        try:
            data.append([float(v) for v in r[1:]])
        except ValueError as exc:
            raise FormatError(f"{obs_path}: {exc}", lineno) from None
    raw = np.array(data, dtype=np.float64).reshape(len(data), len(columns))
    values = np.empty((len(snapshot.nodes), F, len(data)))
    for c, (n, f) in enumerate(columns):
        values[snapshot.index(n), f] = raw[:, c]
    return snapshot, SeriesTensor(snapshot.nodes, values)


def load_dataset(root) -> list[tuple[GraphSnapshot, SeriesTensor]]:
    root = Path(root)
    if not root.is_dir():
        raise MissingArtifact(root)
    periods = _period_dirs(root)
    if not periods:
        raise MissingArtifact(root / "period_1")
    return [load_period(path, k) for k, path in periods]


# synthetic generator

@dataclass(frozen=True)
class EvolutionScenario:
    """Parameters of a synthetic evolving road network.

    Signals are ``base + amplitude * sin(2 pi t / steps_per_day + phase)``
    per node plus ``trend * t``, mixed with the neighbour average by
    ``coupling`` and perturbed by Gaussian ``noise``.  At every evolution a
    ``shift_fraction`` of the surviving nodes gets a permanent level jump of
    ``shift_magnitude`` times the global ``amplitude``.
    """

    periods: int = 3
    nodes: int = 50
    steps: int = 576
    steps_per_day: int = 288
    features: int = 1
    k_neighbors: int = 3
    add_node_fraction: float = 0.1
    remove_node_fraction: float = 0.05
    add_edge_fraction: float = 0.05
    remove_edge_fraction: float = 0.05
    shift_fraction: float = 0.1
    shift_magnitude: float = 4.0
    base_level: float = 100.0
    amplitude: float = 30.0
    trend: float = 0.0
    noise: float = 1.0
    coupling: float = 0.3
    distance_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.periods < 1 or self.nodes < 2 or self.steps < 1 or self.steps_per_day < 1:
            raise ScenarioError("periods, steps and steps_per_day must be >= 1 and nodes >= 2")
        if self.features not in (1, 2):
            raise ScenarioError("features must be 1 (flow) or 2 (flow, time of day)")
        for name in ("add_node_fraction", "remove_node_fraction", "add_edge_fraction",
                     "remove_edge_fraction", "shift_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ScenarioError(f"{name} must be in [0, 1), got {v}")
        if self.k_neighbors < 1 or self.noise < 0:
            raise ScenarioError("k_neighbors must be >= 1 and noise >= 0")

    @classmethod
    def from_file(cls, path) -> "EvolutionScenario":
        path = Path(path)
        if not path.exists():
            raise MissingArtifact(path)
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        raw = raw.get("scenario", raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**raw)

    def to_toml(self) -> str:
        lines = ["[scenario]"]
        for k, v in asdict(self).items():
            lines.append(f"{k} = {v!r}")
        return "\n".join(lines) + "\n"


@dataclass
class GeneratedDataset:
    pairs: list
    planted_shifts: dict  # period -> {node_id: jump}


def _knn_edges(ids, pos, targets, k):
    tree = cKDTree(np.array([pos[t] for t in targets]))
    edges = set()
    for i in ids:
        kk = min(k + 1, len(targets))
        _, idx = tree.query(pos[i], k=kk)
        for j in np.atleast_1d(idx):
            j = targets[j]
            if j != i:
                edges.add((int(min(i, j)), int(max(i, j))))
    return edges


def _giant_fraction(nodes, edges) -> float:
    index = {n: i for i, n in enumerate(nodes)}
    if not nodes:
        return 0.0
    rows = [index[u] for u, v in edges] + [index[v] for u, v in edges]
    cols = [index[v] for u, v in edges] + [index[u] for u, v in edges]
    m = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
    _, labels = connected_components(m, directed=False)
    return np.bincount(labels).max() / len(nodes)


def _bridge_components(nodes, edges, pos):
    """Join every component to its nearest node outside it, smallest first."""
    edges = set(edges)
    while True:
        index = {n: i for i, n in enumerate(nodes)}
        rows = [index[u] for u, v in edges] + [index[v] for u, v in edges]
        cols = [index[v] for u, v in edges] + [index[u] for u, v in edges]
        m = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(nodes), len(nodes)))
        count, labels = connected_components(m, directed=False)
        if count <= 1:
            return edges
        smallest = np.argmin(np.bincount(labels))
        inside = [n for n, c in zip(nodes, labels) if c == smallest]
        outside = [n for n, c in zip(nodes, labels) if c != smallest]
        tree = cKDTree(np.array([pos[n] for n in outside]))
        best = min((tree.query(pos[n])[0], n, outside[tree.query(pos[n])[1]]) for n in inside)
        _, u, v = best
        edges.add((min(u, v), max(u, v)))


def _with_distances(nodes, edges, pos, scale):
    return [(u, v, float(np.linalg.norm(pos[u] - pos[v]) * scale)) for u, v in sorted(edges)]


def _evolve(rng, sc, nodes, edges, pos, next_id):
    nodes = list(nodes)
    edges = set(edges)
    n_remove = int(round(sc.remove_node_fraction * len(nodes)))
    n_add = int(round(sc.add_node_fraction * len(nodes)))
    removed = set(rng.choice(nodes, size=n_remove, replace=False).tolist()) if n_remove else set()
    nodes = [n for n in nodes if n not in removed]
    edges = {(u, v) for u, v in edges if u not in removed and v not in removed}
    old_nodes = list(nodes)
    old_edges = sorted(edges)
    n_edge_remove = int(round(sc.remove_edge_fraction * len(old_edges)))
    if n_edge_remove:
        drop = rng.choice(len(old_edges), size=n_edge_remove, replace=False)
        edges -= {old_edges[i] for i in drop}
    for _ in range(n_add):
        nid = next_id
        next_id += 1
        pos[nid] = rng.uniform(0.0, 1.0, size=2)
        nodes.append(nid)
        edges |= _knn_edges([nid], pos, np.array(nodes), sc.k_neighbors)
    n_edge_add = int(round(sc.add_edge_fraction * len(old_edges)))
    arr = np.array(sorted(nodes))
    tree = cKDTree(np.array([pos[n] for n in arr]))
    for _ in range(n_edge_add):
        u = int(rng.choice(old_nodes))
        _, idx = tree.query(pos[u], k=min(len(arr), sc.k_neighbors + 8))
        for j in np.atleast_1d(idx):
            v = int(arr[j])
            key = (min(u, v), max(u, v))
            if v != u and key not in edges:
                edges.add(key)
                break
    return sorted(nodes), edges, next_id


def _signals(sc: EvolutionScenario, rng, period, nodes, edges, params):
    t = (period - 1) * sc.steps + np.arange(sc.steps)
    N = len(nodes)
    raw = np.empty((N, sc.steps))
    for i, n in enumerate(nodes):
        base, amp, phase = params[n]
        raw[i] = base + amp * np.sin(2 * np.pi * t / sc.steps_per_day + phase) + sc.trend * t
    index = {n: i for i, n in enumerate(nodes)}
    mixed = raw.copy()
    if sc.coupling and edges:
        neigh = [[] for _ in nodes]
        for u, v in edges:
            neigh[index[u]].append(index[v])
            neigh[index[v]].append(index[u])
        for i, nb in enumerate(neigh):
            if nb:
                mixed[i] += sc.coupling * (raw[nb].mean(axis=0) - raw[i])
    if sc.noise:
        mixed += sc.noise * rng.standard_normal(mixed.shape)
    if sc.features == 1:
        return mixed[:, None, :]
    tod = (t % sc.steps_per_day) / sc.steps_per_day
    return np.stack([mixed, np.broadcast_to(tod, mixed.shape)], axis=1)


def generate_scenario(scenario: EvolutionScenario, out_dir=None, max_retries: int = 10) -> GeneratedDataset:
    """Build a synthetic evolving dataset; writes it to ``out_dir`` if given."""
    sc = scenario
    rng = np.random.default_rng(sc.seed)
    pos = {}
    for _ in range(max_retries):
        for n in range(sc.nodes):
            pos[n] = rng.uniform(0.0, 1.0, size=2)
        nodes = list(range(sc.nodes))
        edges = _knn_edges(nodes, pos, np.array(nodes), sc.k_neighbors)
        edges = _bridge_components(nodes, edges, pos)
        if _giant_fraction(nodes, edges) >= 0.9:
            break
    else:
        raise ScenarioError("could not generate a connected initial graph")
    next_id = sc.nodes

    def draw_params():
        return [
            sc.base_level * rng.uniform(0.5, 1.5),
            sc.amplitude * rng.uniform(0.5, 1.5),
            rng.uniform(-0.5, 0.5),
        ]

    params = {n: draw_params() for n in nodes}
    graphs = [(nodes, edges)]
    shifts = {}
    for period in range(2, sc.periods + 1):
        for _ in range(max_retries):
            pos_before = dict(pos)
            new_nodes, new_edges, new_next = _evolve(rng, sc, nodes, edges, pos, next_id)
            if new_nodes:
                new_edges = _bridge_components(new_nodes, new_edges, pos)
            if new_nodes and _giant_fraction(new_nodes, new_edges) >= 0.9:
                break
            pos.clear()
            pos.update(pos_before)
        else:
            raise ScenarioError(f"evolution to period {period} leaves the graph fragmented or empty")
        survivors = sorted(set(nodes) & set(new_nodes))
        for n in new_nodes:
            if n not in params:
                params[n] = draw_params()
        n_shift = int(round(sc.shift_fraction * len(survivors)))
        chosen = sorted(rng.choice(survivors, size=n_shift, replace=False).tolist()) if n_shift else []
        shifts[period] = {}
        for n in chosen:
            jump = sc.shift_magnitude * sc.amplitude
            params[n][0] += jump
            shifts[period][n] = jump
        nodes, edges, next_id = new_nodes, new_edges, new_next
        graphs.append((nodes, edges))

    # signals are drawn per period after topology so node parameters reflect
    # the jumps planted up to that period
    pairs = []
    param_history = _replay_params(sc, graphs, params, shifts)
    for period, (nodes_p, edges_p) in enumerate(graphs, start=1):
        snapshot = GraphSnapshot(period, tuple(nodes_p), tuple(_with_distances(nodes_p, edges_p, pos, sc.distance_scale)))
        values = _signals(sc, rng, period, snapshot.nodes, edges_p, param_history[period])
        pairs.append((snapshot, SeriesTensor(snapshot.nodes, values)))
    result = GeneratedDataset(pairs, shifts)
    if out_dir is not None:
        write_generated(result, sc, out_dir)
    return result


def _replay_params(sc, graphs, final_params, shifts):
    """Per-period node parameters: undo the jumps planted after each period."""
    history = {}
    current = {n: list(p) for n, p in final_params.items()}
    for period in range(len(graphs), 0, -1):
        history[period] = {n: tuple(p) for n, p in current.items()}
        for n, jump in shifts.get(period, {}).items():
            current[n][0] -= jump
    return history


def write_generated(result: GeneratedDataset, scenario: EvolutionScenario, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_dataset(out_dir, result.pairs)
    with open(out_dir / "planted_shifts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period", "node_id", "shift"])
        for period in sorted(result.planted_shifts):
            for n, jump in sorted(result.planted_shifts[period].items()):
                w.writerow([period, n, repr(float(jump))])
    (out_dir / "scenario.toml").write_text(scenario.to_toml(), encoding="utf-8")


def load_planted_shifts(path) -> dict:
    path = Path(path)
    rows = _read_rows(path)
    out = {}
    for lineno, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        if len(r) != 3:
            raise FormatError(f"{path}: expected 3 fields", lineno)
        out.setdefault(int(r[0]), {})[int(r[1])] = float(r[2])
    return out
