"""Training environments built from one graph by feature masking and edge dropping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import ContractError, SparseAdj
from .graph import Graph, normalize_edges


@dataclass(frozen=True)
class AugmentConfig:
    mask_rate: float = 0.1
    drop_rate: float = 0.1
    seed: int = 0
    include_original: bool = False
    env_seeds: tuple[int, ...] | None = None

    def __post_init__(self):
        for name in ("mask_rate", "drop_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate < 1.0 and not (name == "drop_rate" and rate == 1.0):
                raise ContractError(f"{name} must lie in [0, 1), got {rate}")
        if self.env_seeds is not None and len(set(self.env_seeds)) != len(self.env_seeds):
            raise ContractError("per-environment seeds must be distinct")

    def seed_for(self, index: int) -> np.random.SeedSequence:
        if self.env_seeds is not None:
            return np.random.SeedSequence(self.env_seeds[index])
        return np.random.SeedSequence([self.seed, index])


@dataclass(frozen=True)
class Environment:
    X: np.ndarray
    adj: SparseAdj
    edges: np.ndarray


@dataclass(frozen=True)
class EnvironmentSet:
    envs: tuple[Environment, ...]
    config: AugmentConfig = field(default_factory=AugmentConfig)

    def __len__(self) -> int:
        return len(self.envs)

    def __iter__(self):
        return iter(self.envs)

    def __getitem__(self, i) -> Environment:
        return self.envs[i]


def augment_once(graph: Graph, config: AugmentConfig, index: int) -> Environment:
    """One augmented view: per-entry feature masking plus per-edge dropping.

    Surviving entries are kept at their original values (no rescaling).
    """
    feat_rng, edge_rng = (np.random.default_rng(s) for s in config.seed_for(index).spawn(2))
    X = graph.X
    if config.mask_rate > 0:
        keep = feat_rng.random(X.shape) >= config.mask_rate
        X = np.where(keep, X, 0.0)
    else:
        X = X.copy()
    edges = graph.edges
    if config.drop_rate > 0 and len(edges):
        edges = edges[edge_rng.random(len(edges)) >= config.drop_rate]
    return Environment(X, normalize_edges(edges, graph.n), edges)


def original_environment(graph: Graph) -> Environment:
    return Environment(graph.X.copy(), normalize_edges(graph.edges, graph.n), graph.edges)


def build_environments(graph: Graph, M: int, config: AugmentConfig) -> EnvironmentSet:
    """``M`` independent augmented views; view 0 is the untouched graph if requested."""
    if M < 2:
        raise ContractError(f"need M >= 2 environments for risk variance, got M={M}")
    if config.env_seeds is not None and len(config.env_seeds) < M:
        raise ContractError(f"{len(config.env_seeds)} environment seeds given for M={M}")
    envs = []
    for e in range(M):
        if e == 0 and config.include_original:
            envs.append(original_environment(graph))
        else:
            envs.append(augment_once(graph, config, e))
    return EnvironmentSet(tuple(envs), config)
