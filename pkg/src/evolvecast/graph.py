"""Graph snapshots with persistent node ids, snapshot deltas and the
distance-kernel adjacency / rescaled Laplacian used by the spectral layer.

Node order is ascending node id everywhere, so matrix row ``i`` of any
matrix built from a snapshot always refers to ``snapshot.nodes[i]``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import (
    DegenerateDistances,
    InvalidGraph,
    InvalidPeriodSequence,
    UnknownNode,
)

Edge = tuple[int, int, float]


def _canonical(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class GraphSnapshot:
    """Undirected distance-weighted road graph for one period.

    ``edges`` holds ``(u, v, distance)`` triples with ``u < v``, sorted.
    Instances are immutable; use the constructors below.
    """

    period: int
    nodes: tuple[int, ...]
    edges: tuple[Edge, ...]
    _index: dict = field(default=None, init=False, repr=False, compare=False)
    _adjlist: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.period < 1:
            raise InvalidGraph(f"period must be >= 1, got {self.period}")
        nodes = tuple(sorted(int(n) for n in self.nodes))
        if len(set(nodes)) != len(nodes):
            raise InvalidGraph("duplicate node ids")
        node_set = set(nodes)
        seen = set()
        canon = []
        for u, v, d in self.edges:
            u, v, d = int(u), int(v), float(d)
            if u == v:
                raise InvalidGraph(f"self-loop on node {u}")
            if u not in node_set or v not in node_set:
                raise InvalidGraph(f"edge ({u}, {v}) has an endpoint outside the node set")
            if not math.isfinite(d) or d < 0:
                raise InvalidGraph(f"edge ({u}, {v}) has invalid distance {d}")
            key = _canonical(u, v)
            if key in seen:
                raise InvalidGraph(f"duplicate edge {key}")
            seen.add(key)
            canon.append((key[0], key[1], d))
        canon.sort()
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", tuple(canon))
        object.__setattr__(self, "_index", {n: i for i, n in enumerate(nodes)})
        adj = {n: set() for n in nodes}
        for u, v, _ in canon:
            adj[u].add(v)
            adj[v].add(u)
        object.__setattr__(self, "_adjlist", adj)

    @classmethod
    def from_edges(cls, period: int, nodes: Iterable[int], edges: Iterable[Edge]) -> "GraphSnapshot":
        return cls(period, tuple(nodes), tuple(edges))

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def node_set(self) -> frozenset:
        return frozenset(self.nodes)

    def index(self, node: int) -> int:
        try:
            return self._index[node]
        except KeyError:
            raise UnknownNode(f"node {node} not in snapshot of period {self.period}") from None

    def neighbors(self, node: int) -> set[int]:
        if node not in self._adjlist:
            raise UnknownNode(f"node {node} not in snapshot of period {self.period}")
        return set(self._adjlist[node])

    def edge_keys(self) -> set[tuple[int, int]]:
        return {(u, v) for u, v, _ in self.edges}

    def with_period(self, period: int) -> "GraphSnapshot":
        return GraphSnapshot(period, self.nodes, self.edges)


@dataclass(frozen=True)
class GraphDelta:
    """Changes between two consecutive snapshots.

    Edges are compared as ``(u, v, distance)`` triples, so an edge whose
    distance changed appears once as removed and once as added.
    """

    added_nodes: frozenset
    removed_nodes: frozenset
    added_edges: frozenset
    removed_edges: frozenset
    affected_nodes: frozenset

    def is_empty(self) -> bool:
        return not (self.added_nodes or self.removed_nodes or self.added_edges or self.removed_edges)

    def summary(self) -> str:
        return (
            f"nodes +{len(self.added_nodes)} -{len(self.removed_nodes)}, "
            f"edges +{len(self.added_edges)} -{len(self.removed_edges)}, "
            f"affected {len(self.affected_nodes)}"
        )


def compute_delta(prev: GraphSnapshot, nxt: GraphSnapshot) -> GraphDelta:
    if prev.period + 1 != nxt.period:
        raise InvalidPeriodSequence(
            f"expected period {prev.period + 1} after {prev.period}, got {nxt.period}"
        )
    prev_nodes, next_nodes = prev.node_set, nxt.node_set
    added_nodes = next_nodes - prev_nodes
    removed_nodes = prev_nodes - next_nodes
    prev_edges, next_edges = set(prev.edges), set(nxt.edges)
    added_edges = next_edges - prev_edges
    removed_edges = prev_edges - next_edges

    affected = set()
    for u, v, _ in added_edges | removed_edges:
        affected.update((u, v))
    for n in added_nodes:
        affected |= nxt.neighbors(n)
    for n in removed_nodes:
        affected |= prev.neighbors(n)
    affected -= removed_nodes
    return GraphDelta(
        frozenset(added_nodes),
        frozenset(removed_nodes),
        frozenset(added_edges),
        frozenset(removed_edges),
        frozenset(affected),
    )


def apply_delta(prev: GraphSnapshot, delta: GraphDelta) -> GraphSnapshot:
    nodes = (prev.node_set - delta.removed_nodes) | delta.added_nodes
    edges = (set(prev.edges) - delta.removed_edges) | delta.added_edges
    return GraphSnapshot(prev.period + 1, tuple(nodes), tuple(edges))


def induced_subgraph(snapshot: GraphSnapshot, keep: Iterable[int]) -> GraphSnapshot:
    keep = set(keep)
    missing = keep - snapshot.node_set
    if missing:
        raise UnknownNode(f"nodes {sorted(missing)} not in snapshot of period {snapshot.period}")
    edges = [e for e in snapshot.edges if e[0] in keep and e[1] in keep]
    return GraphSnapshot(snapshot.period, tuple(keep), tuple(edges))


@dataclass(frozen=True)
class WeightedAdjacency:
    nodes: tuple[int, ...]
    matrix: np.ndarray
    sigma: float


@dataclass(frozen=True)
class RescaledLaplacian:
    nodes: tuple[int, ...]
    laplacian: np.ndarray
    matrix: np.ndarray
    lambda_max: float
    converged: bool

    @property
    def size(self) -> int:
        return len(self.nodes)


def build_adjacency(snapshot: GraphSnapshot, epsilon: float = 0.1) -> WeightedAdjacency:
    """Gaussian distance kernel ``exp(-d^2 / sigma^2)`` over the snapshot's edges.

    ``sigma`` is the standard deviation of this snapshot's edge distances.
    Weights below ``epsilon`` are zeroed; non-edges are zero.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    if snapshot.num_nodes < 1:
        raise InvalidGraph("cannot build an adjacency for an empty graph")
    n = snapshot.num_nodes
    A = np.zeros((n, n))
    if not snapshot.edges:
        return WeightedAdjacency(snapshot.nodes, A, 1.0)
    dist = np.array([d for _, _, d in snapshot.edges])
    sigma = float(np.std(dist))
    if sigma == 0.0:
        warnings.warn(
            "edge distances have zero spread; using sigma = 1", DegenerateDistances, stacklevel=2
        )
        sigma = 1.0
    w = np.exp(-(dist**2) / sigma**2)
    w[w < epsilon] = 0.0
    rows = np.array([snapshot.index(u) for u, _, _ in snapshot.edges])
    cols = np.array([snapshot.index(v) for _, v, _ in snapshot.edges])
    A[rows, cols] = w
    A[cols, rows] = w
    return WeightedAdjacency(snapshot.nodes, A, sigma)


def normalized_laplacian(adj: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; isolated nodes get an all-zero row and column."""
    adj = np.asarray(adj, dtype=float)
    deg = adj.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    L = np.diag(nz.astype(float)) - inv_sqrt[:, None] * adj * inv_sqrt[None, :]
    return 0.5 * (L + L.T)


def power_iteration(M: np.ndarray, tol: float = 1e-6, max_iter: int = 1000) -> tuple[float, bool]:
    """Upper estimate of the largest eigenvalue of a symmetric PSD matrix.

    Iterates until the residual ``||Mv - theta v||`` is within ``tol * theta``
    and returns ``theta + ||r||``, which bounds the top eigenvalue from above
    once ``v`` has aligned with the top eigenvector.
    """
    n = M.shape[0]
    if n == 0:
        return 0.0, False
    v = np.random.default_rng(0).standard_normal(n)
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = M @ v
        theta = float(v @ w)
        resid = float(np.linalg.norm(w - theta * v))
        if theta <= 0.0:
            return 0.0, False
        if resid <= tol * theta:
            return theta + resid, True
        v = w / np.linalg.norm(w)
    return theta, False


def build_rescaled_laplacian(adj, tol: float = 1e-6, max_iter: int = 1000) -> RescaledLaplacian:
    if isinstance(adj, WeightedAdjacency):
        nodes, A = adj.nodes, adj.matrix
    else:
        A = np.asarray(adj, dtype=float)
        nodes = tuple(range(A.shape[0]))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InvalidGraph(f"adjacency must be square, got {A.shape}")
    if (A < 0).any() or not np.allclose(A, A.T, atol=1e-12):
        raise InvalidGraph("adjacency must be symmetric and non-negative")
    L = normalized_laplacian(A)
    lam, converged = power_iteration(L, tol, max_iter)
    if not converged or lam <= 0.0:
        lam, converged = 2.0, False
    lam = min(lam, 2.0)
    n = A.shape[0]
    L_hat = 2.0 * L / lam - np.eye(n)
    return RescaledLaplacian(tuple(nodes), L, L_hat, lam, converged)


def laplacian_for(snapshot: GraphSnapshot, epsilon: float = 0.1) -> RescaledLaplacian:
    return build_rescaled_laplacian(build_adjacency(snapshot, epsilon))
