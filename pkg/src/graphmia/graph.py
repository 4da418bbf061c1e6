"""Attributed undirected graphs, GCN normalization and disjoint node splits."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .diffcore import ContractError, SparseAdj


def canonical_edges(edges, n: int) -> np.ndarray:
    """Deduplicate an edge list into sorted ``(u, v)`` rows with ``u < v``.

    Direction is discarded and self-loops are dropped.
    """
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise ContractError(f"edge endpoint out of range for n={n}")
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


@dataclass(frozen=True, eq=False)
class Graph:
    """Node-attributed undirected graph.

    ``edges`` holds each undirected edge once as ``(u, v)`` with ``u < v``.
    """

    n: int
    edges: np.ndarray
    X: np.ndarray
    y: np.ndarray
    C: int
    name: str = field(default="")

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        edges = canonical_edges(self.edges, self.n)
        if X.ndim != 2 or X.shape[0] != self.n:
            raise ContractError(f"feature matrix must have {self.n} rows, got {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ContractError("features must be finite")
        if y.shape != (self.n,):
            raise ContractError(f"label vector must have length {self.n}, got {y.shape}")
        if self.n and (y.min() < 0 or y.max() >= self.C):
            raise ContractError(f"labels must lie in [0, {self.C})")
        X.setflags(write=False)
        y.setflags(write=False)
        edges.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "edges", edges)

    @property
    def f(self) -> int:
        return self.X.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> sp.csr_matrix:
        """Binary symmetric adjacency without self-loops."""
        return edges_to_csr(self.edges, self.n)

    def with_features(self, X: np.ndarray) -> "Graph":
        return Graph(self.n, self.edges, X, self.y, self.C, self.name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.n == other.n and self.C == other.C
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y))

    __hash__ = None


def edges_to_csr(edges: np.ndarray, n: int) -> sp.csr_matrix:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    return sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))


def normalize_edges(edges: np.ndarray, n: int) -> SparseAdj:
    """``D^-1/2 (A + I) D^-1/2`` for an undirected edge list."""
    A = edges_to_csr(edges, n) + sp.identity(n, format="csr")
    d = np.asarray(A.sum(axis=1)).ravel()
    inv = 1.0 / np.sqrt(d)
    Dinv = sp.diags(inv)
    return SparseAdj(sp.csr_matrix(Dinv @ A @ Dinv), check=False)


def normalize_adjacency(graph: Graph) -> SparseAdj:
    """Symmetrically normalized adjacency with self-loops (isolated nodes get 1)."""
    return normalize_edges(graph.edges, graph.n)


@dataclass(frozen=True)
class SplitGraph:
    """Disjoint train/test node-index sets."""

    train: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        if np.intersect1d(self.train, self.test).size:
            raise ContractError("train and test node sets overlap")


def split_disjoint(graph: Graph, fraction: float, seed: int) -> SplitGraph:
    """Uniformly assign ``round(fraction * n)`` nodes to train, the rest to test."""
    if not 0.0 < fraction < 1.0:
        raise ContractError(f"train fraction must lie in (0, 1), got {fraction}")
    k = int(round(fraction * graph.n))
    if k == 0 or k == graph.n:
        raise ContractError(f"fraction {fraction} leaves one side of the split empty (n={graph.n})")
    perm = np.random.default_rng(seed).permutation(graph.n)
    return SplitGraph(np.sort(perm[:k]), np.sort(perm[k:]))


def induced_subgraph(graph: Graph, nodes, name: str = "") -> Graph:
    """Subgraph on ``nodes`` (relabelled 0..k-1 in the given order), keeping internal edges."""
    nodes = np.asarray(nodes, dtype=np.int64)
    if np.unique(nodes).size != nodes.size:
        raise ContractError("induced subgraph node list has duplicates")
    remap = np.full(graph.n, -1, dtype=np.int64)
    remap[nodes] = np.arange(nodes.size)
    e = remap[graph.edges] if len(graph.edges) else np.zeros((0, 2), dtype=np.int64)
    e = e[(e >= 0).all(axis=1)] if len(e) else e
    return Graph(nodes.size, e, graph.X[nodes], graph.y[nodes], graph.C, name or graph.name)
