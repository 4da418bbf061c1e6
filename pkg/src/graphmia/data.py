"""Graph loading, spurious-feature domain shift and group splits.

Single-container text format (version 1)::

    GMIA-GRAPH 1
    name <token>              (optional line)
    nodes <n>
    features <f>
    classes <C>
    edges <m>
    [features]
    <f whitespace-separated floats>      x n lines
    [labels]
    <int>                                x n lines
    [edges]
    <u> <v>                              x m lines, 0-indexed, each edge once
    [end]

Floats are written with ``repr`` so a write/read round trip is exact.  Blank
lines and lines starting with ``#`` are ignored.

Edge-list layout (a directory)::

    edges.tsv      one "u<TAB>v" pair per line, 0-indexed
    features.csv   one node per row (``header=True`` skips the first line)
    labels.txt     one integer per line
    groups.txt     optional, one group name per line aligned with node order
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import ContractError
from .graph import Graph, induced_subgraph

CONTAINER_MAGIC = "GMIA-GRAPH"
CONTAINER_VERSION = 1


class GraphParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


# --------------------------------------------------------------- containers

def dump_container(graph: Graph) -> str:
    lines = [f"{CONTAINER_MAGIC} {CONTAINER_VERSION}"]
    if graph.name:
        lines.append(f"name {graph.name.replace(' ', '_')}")
    lines += [f"nodes {graph.n}", f"features {graph.f}", f"classes {graph.C}",
              f"edges {graph.num_edges}", "[features]"]
    lines += [" ".join(repr(float(v)) for v in row) for row in graph.X]
    lines.append("[labels]")
    lines += [str(int(v)) for v in graph.y]
    lines.append("[edges]")
    lines += [f"{u} {v}" for u, v in graph.edges]
    lines.append("[end]")
    return "\n".join(lines) + "\n"


def write_container(graph: Graph, path) -> None:
    Path(path).write_text(dump_container(graph))


def parse_container(text: str, path="<string>") -> Graph:
    rows = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines())]
    rows = [(i, ln) for i, ln in rows if ln and not ln.startswith("#")]
    it = iter(rows)

    def take(what: str):
        try:
            return next(it)
        except StopIteration:
            raise GraphParseError(path, rows[-1][0] if rows else 0, f"unexpected end of file, expected {what}")

    lineno, line = take("header")
    parts = line.split()
    if len(parts) != 2 or parts[0] != CONTAINER_MAGIC:
        raise GraphParseError(path, lineno, f"expected '{CONTAINER_MAGIC} <version>'")
    if parts[1] != str(CONTAINER_VERSION):
        raise GraphParseError(path, lineno, f"unsupported version {parts[1]}")

    header: dict[str, str] = {}
    while True:
        lineno, line = take("[features]")
        if line == "[features]":
            break
        key, _, value = line.partition(" ")
        if key not in ("name", "nodes", "features", "classes", "edges") or not value:
            raise GraphParseError(path, lineno, f"bad header line {line!r}")
        header[key] = value.strip()
    try:
        n, f, C, m = (int(header[k]) for k in ("nodes", "features", "classes", "edges"))
    except KeyError as exc:
        raise GraphParseError(path, lineno, f"missing header field {exc.args[0]}") from None
    except ValueError:
        raise GraphParseError(path, lineno, "header counts must be integers") from None

    X = np.zeros((n, f))
    for i in range(n):
        lineno, line = take("feature row")
        try:
            vals = [float(t) for t in line.split()]
        except ValueError:
            raise GraphParseError(path, lineno, "non-numeric feature value") from None
        if len(vals) != f:
            raise GraphParseError(path, lineno, f"expected {f} features, found {len(vals)}")
        X[i] = vals
    lineno, line = take("[labels]")
    if line != "[labels]":
        raise GraphParseError(path, lineno, "expected [labels]")
    y = np.zeros(n, dtype=np.int64)
    for i in range(n):
        lineno, line = take("label")
        try:
            y[i] = int(line)
        except ValueError:
            raise GraphParseError(path, lineno, f"bad label {line!r}") from None
        if not 0 <= y[i] < C:
            raise GraphParseError(path, lineno, f"label {y[i]} outside [0, {C})")
    lineno, line = take("[edges]")
    if line != "[edges]":
        raise GraphParseError(path, lineno, "expected [edges]")
    edges = np.zeros((m, 2), dtype=np.int64)
    for k in range(m):
        lineno, line = take("edge")
        edges[k] = _parse_edge(line, n, path, lineno)
    lineno, line = take("[end]")
    if line != "[end]":
        raise GraphParseError(path, lineno, "expected [end]")
    return Graph(n, edges, X, y, C, header.get("name", ""))


def _parse_edge(line: str, n: int, path, lineno: int) -> tuple[int, int]:
    parts = line.split()
    if len(parts) != 2:
        raise GraphParseError(path, lineno, f"edge line needs two node ids, got {line!r}")
    try:
        u, v = int(parts[0]), int(parts[1])
    except ValueError:
        raise GraphParseError(path, lineno, f"non-integer node id in {line!r}") from None
    if not (0 <= u < n and 0 <= v < n):
        raise GraphParseError(path, lineno, f"node id out of range [0, {n})")
    return u, v


def read_container(path) -> Graph:
    return parse_container(Path(path).read_text(), path)


# ---------------------------------------------------------------- edge lists

def _read_lines(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def read_edgelist_dir(path, header: bool = False, num_classes: int | None = None) -> tuple[Graph, list[str] | None]:
    """Load ``edges.tsv``/``features.csv``/``labels.txt`` (+ optional ``groups.txt``)."""
    root = Path(path)
    feats = []
    with open(root / "features.csv", newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, 1):
            if header and lineno == 1:
                continue
            if not row:
                continue
            try:
                feats.append([float(t) for t in row])
            except ValueError:
                raise GraphParseError(root / "features.csv", lineno, "non-numeric feature value") from None
            if len(feats[-1]) != len(feats[0]):
                raise GraphParseError(root / "features.csv", lineno,
                                      f"expected {len(feats[0])} columns, found {len(feats[-1])}")
    X = np.asarray(feats, dtype=np.float64)
    n = X.shape[0]
    labels = []
    for lineno, line in _read_lines(root / "labels.txt"):
        try:
            labels.append(int(line))
        except ValueError:
            raise GraphParseError(root / "labels.txt", lineno, f"bad label {line!r}") from None
        if labels[-1] < 0 or (num_classes is not None and labels[-1] >= num_classes):
            raise GraphParseError(root / "labels.txt", lineno, f"label {labels[-1]} outside [0, {num_classes})")
    if len(labels) != n:
        raise ContractError(f"{len(labels)} labels for {n} feature rows")
    edges = [_parse_edge(line.replace("\t", " "), n, root / "edges.tsv", lineno)
             for lineno, line in _read_lines(root / "edges.tsv")]
    C = num_classes if num_classes is not None else (max(labels) + 1 if labels else 1)
    groups = None
    if (root / "groups.txt").exists():
        groups = [line for _, line in _read_lines(root / "groups.txt")]
        if len(groups) != n:
            raise ContractError(f"{len(groups)} group entries for {n} nodes")
    return Graph(n, np.asarray(edges, dtype=np.int64).reshape(-1, 2), X, labels, C, root.name), groups


def write_edgelist_dir(graph: Graph, path, groups: list[str] | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "features.csv", "w", newline="") as fh:
        csv.writer(fh).writerows([[repr(float(v)) for v in row] for row in graph.X])
    (root / "labels.txt").write_text("".join(f"{int(v)}\n" for v in graph.y))
    (root / "edges.tsv").write_text("".join(f"{u}\t{v}\n" for u, v in graph.edges))
    if groups is not None:
        (root / "groups.txt").write_text("".join(f"{g}\n" for g in groups))


def read_planetoid_raw(path) -> Graph:
    """Raw LINQS citation files: ``<name>.content`` and ``<name>.cites`` under ``path``.

    Citations to papers missing from the content file are skipped.
    """
    root = Path(path)
    content = next(root.glob("*.content"))
    cites = next(root.glob("*.cites"))
    ids, feats, names = [], [], []
    for _, line in _read_lines(content):
        parts = line.split()
        ids.append(parts[0])
        feats.append([float(t) for t in parts[1:-1]])
        names.append(parts[-1])
    classes = sorted(set(names))
    index = {pid: i for i, pid in enumerate(ids)}
    edges = []
    for _, line in _read_lines(cites):
        a, b = line.split()
        if a in index and b in index:
            edges.append((index[a], index[b]))
    y = [classes.index(c) for c in names]
    return Graph(len(ids), np.asarray(edges, dtype=np.int64).reshape(-1, 2), np.asarray(feats), y,
                 len(classes), content.stem)


FORMATS = ("container", "edgelist", "planetoid")


def load_graph(path, format: str = "container", header: bool = False,
               num_classes: int | None = None) -> Graph:
    if format == "container":
        return read_container(path)
    if format == "edgelist":
        return read_edgelist_dir(path, header=header, num_classes=num_classes)[0]
    if format == "planetoid":
        return read_planetoid_raw(path)
    raise ContractError(f"unknown graph format {format!r}; expected one of {FORMATS}")


# ------------------------------------------------------------ domain shift

@dataclass(frozen=True)
class ShiftConfig:
    dims: int = 8
    strength: float = 1.0
    noise: float = 1.0

    def __post_init__(self):
        if self.dims < 0:
            raise ContractError(f"spurious dimension count must be >= 0, got {self.dims}")
        if not 0.0 <= self.strength <= 1.0:
            raise ContractError(f"shift strength must lie in [0, 1], got {self.strength}")
        if self.noise < 0:
            raise ContractError(f"noise scale must be >= 0, got {self.noise}")


def class_embeddings(C: int, dims: int, domain_seed: int) -> np.ndarray:
    return np.random.default_rng([domain_seed, 0]).standard_normal((C, dims))


def synthesize_spurious_shift(graph: Graph, config: ShiftConfig, domain_seed: int) -> Graph:
    """Append ``config.dims`` label-correlated columns whose class mapping depends on ``domain_seed``."""
    if config.dims == 0:
        return graph
    emb = class_embeddings(graph.C, config.dims, domain_seed)
    noise = np.random.default_rng([domain_seed, 1]).standard_normal((graph.n, config.dims))
    block = config.strength * emb[graph.y] + config.noise * noise
    return graph.with_features(np.hstack([graph.X, block]))


@dataclass(frozen=True)
class DatasetBundle:
    target: Graph
    shadow: Graph
    meta: dict = field(default_factory=dict)


def split_by_group(graph: Graph, groups, shadow_groups, target_groups) -> DatasetBundle:
    """Node-induced shadow and target subgraphs from disjoint group sets."""
    groups = np.asarray(list(groups), dtype=object)
    if groups.size != graph.n:
        raise ContractError(f"{groups.size} group labels for {graph.n} nodes")
    shadow_groups, target_groups = set(shadow_groups), set(target_groups)
    overlap = shadow_groups & target_groups
    if overlap:
        raise ContractError(f"groups {sorted(overlap)} are on both the shadow and target side")
    known = set(groups.tolist())
    missing = (shadow_groups | target_groups) - known
    if missing:
        raise ContractError(f"unknown groups {sorted(missing)}")
    s_nodes = np.flatnonzero(np.isin(groups, list(shadow_groups)))
    t_nodes = np.flatnonzero(np.isin(groups, list(target_groups)))
    return DatasetBundle(
        induced_subgraph(graph, t_nodes, "+".join(sorted(target_groups))),
        induced_subgraph(graph, s_nodes, "+".join(sorted(shadow_groups))),
        {"target_groups": sorted(target_groups), "shadow_groups": sorted(shadow_groups)},
    )


# ------------------------------------------------------- synthetic benchmark

def synthetic_citation_graph(n: int = 1200, C: int = 5, f: int = 300, avg_degree: float = 4.0,
                             homophily: float = 0.8, words: int = 12, topic_purity: float = 0.35,
                             seed: int = 0, name: str = "synthetic") -> Graph:
    """Citation-style graph: homophilous random edges and sparse binary bag-of-words features.

    Each class owns a block of ``f // C`` vocabulary words; a node draws ``words``
    distinct words, each from its class block with probability ``topic_purity``
    and from the full vocabulary otherwise.
    """
    rng = np.random.default_rng(seed)
    y = rng.integers(0, C, size=n)
    m = int(round(avg_degree * n / 2))
    src = rng.integers(0, n, size=m)
    same = rng.random(m) < homophily
    by_class = [np.flatnonzero(y == c) for c in range(C)]
    dst = rng.integers(0, n, size=m)
    for k in np.flatnonzero(same):
        pool = by_class[y[src[k]]]
        dst[k] = pool[rng.integers(len(pool))]
    block = f // C
    X = np.zeros((n, f))
    for i in range(n):
        topical = rng.random(words) < topic_purity
        local = y[i] * block + rng.integers(0, block, size=words)
        anywhere = rng.integers(0, f, size=words)
        X[i, np.where(topical, local, anywhere)] = 1.0
    return Graph(n, np.stack([src, dst], axis=1), X, y, C, name)


def spurious_benchmark(base: Graph, shift: ShiftConfig, shadow_seed: int, target_seed: int,
                       split_seed: int = 0, target_shift: ShiftConfig | None = None) -> DatasetBundle:
    """Halve ``base`` into shadow/target node sets and shift each with its own domain seed.

    ``target_shift`` overrides ``shift`` on the target side, so the two domains
    can differ in how strongly the spurious block predicts the label.
    """
    target_shift = shift if target_shift is None else target_shift
    perm = np.random.default_rng(split_seed).permutation(base.n)
    half = base.n // 2
    target = induced_subgraph(base, np.sort(perm[:half]), f"{base.name}-target")
    shadow = induced_subgraph(base, np.sort(perm[half:]), f"{base.name}-shadow")
    return DatasetBundle(
        synthesize_spurious_shift(target, target_shift, target_seed),
        synthesize_spurious_shift(shadow, shift, shadow_seed),
        {"source": base.name, "shift": vars(shift), "target_shift": vars(target_shift),
         "shadow_seed": shadow_seed,
         "target_seed": target_seed, "split_seed": split_seed},
    )


def default_output_root() -> Path:
    return Path(os.environ.get("GRAPHMIA_OUT", "results"))
