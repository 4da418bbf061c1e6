"""GCN, SGC and GAT forward passes with a variational bottleneck head.

Layout for ``layers = L``::

    GCN:  H1 = relu(A X W0) ... H_{L-1} = relu(A H W_{L-2})   (penultimate h)
          mu = h Wmu, logvar = h Wlv, z = mu (+ sigma * eps)
          logits = A z W_out
    SGC:  h = A^K X;  mu/logvar as above;  logits = z W_out
    GAT:  as GCN, with attention-weighted aggregation in place of A

Without the bottleneck head the penultimate representation feeds the
output layer directly and ``mu``/``logvar`` are ``None``.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .diffcore import ContractError, NumericError, SparseAdj, Tape, Var

KINDS = ("GCN", "SGC", "GAT")
LEAKY_SLOPE = 0.2
_MASK_FILL = -1e9


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "GCN"
    layers: int = 2
    hidden: int = 64
    heads: int = 1
    K: int = 2
    bottleneck: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"backbone kind must be one of {KINDS}, got {self.kind!r}")
        if self.layers < 1 or self.hidden < 1 or self.K < 1 or self.heads < 1:
            raise ContractError("layers, hidden, K and heads must all be >= 1")


@dataclass
class ModelParams:
    """Named weight matrices; order of insertion is the serialization order."""

    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def __iter__(self):
        return iter(self.weights)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.weights.items()})

    def items(self):
        return self.weights.items()

    def to_tape(self, tape: Tape) -> dict[str, Var]:
        return {k: tape.leaf(v) for k, v in self.weights.items()}

    def equals(self, other: "ModelParams") -> bool:
        return (list(self.weights) == list(other.weights)
                and all(np.array_equal(v, other.weights[k]) for k, v in self.weights.items()))


@dataclass
class ForwardOutput:
    logits: Var
    posteriors: Var
    mu: Optional[Var]
    logvar: Optional[Var]
    leaves: dict[str, Var]


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _shapes(config: BackboneConfig, f: int, C: int) -> dict[str, tuple[int, int]]:
    d = config.hidden
    shapes: dict[str, tuple[int, int]] = {}
    if config.kind == "SGC":
        rep = f
    else:
        rep = f
        for l in range(config.layers - 1):
            for h in range(config.heads if config.kind == "GAT" else 1):
                suffix = f"_{h}" if config.kind == "GAT" else ""
                shapes[f"W{l}{suffix}"] = (rep, d)
                if config.kind == "GAT":
                    shapes[f"att_src{l}{suffix}"] = (d, 1)
                    shapes[f"att_dst{l}{suffix}"] = (1, d)
            rep = d
    if config.bottleneck:
        shapes["W_mu"] = (rep, d)
        shapes["W_logvar"] = (rep, d)
        rep = d
    shapes["W_out"] = (rep, C)
    if config.kind == "GAT":
        shapes["att_src_out"] = (C, 1)
        shapes["att_dst_out"] = (1, C)
    return shapes


def init_params(config: BackboneConfig, f: int, C: int, seed) -> ModelParams:
    """Seeded Glorot-uniform initialization for every weight."""
    rng = np.random.default_rng(seed)
    return ModelParams({name: glorot(rng, *shape) for name, shape in _shapes(config, f, C).items()})


def zero_params(config: BackboneConfig, f: int, C: int) -> ModelParams:
    return ModelParams({name: np.zeros(shape) for name, shape in _shapes(config, f, C).items()})


class _Context:
    """Per-forward constants shared across layers (ones vectors, attention masks)."""

    def __init__(self, tape: Tape, adj: SparseAdj):
        self.tape = tape
        self.adj = adj
        self._ones_col: Var | None = None
        self._ones_row: Var | None = None
        self._mask: Var | None = None

    @property
    def ones_col(self) -> Var:
        if self._ones_col is None:
            self._ones_col = self.tape.const(np.ones((self.adj.n, 1)))
        return self._ones_col

    @property
    def ones_row(self) -> Var:
        if self._ones_row is None:
            self._ones_row = self.tape.const(np.ones((1, self.adj.n)))
        return self._ones_row

    @property
    def mask(self) -> Var:
        if self._mask is None:
            pattern = self.adj.csr.toarray() != 0
            np.fill_diagonal(pattern, True)
            self._mask = self.tape.const(np.where(pattern, 0.0, _MASK_FILL))
        return self._mask


def leaky_relu(tape: Tape, x: Var, slope: float = LEAKY_SLOPE) -> Var:
    return tape.sub(tape.relu(x), tape.scale(tape.relu(tape.scale(x, -1.0)), slope))


def _gat_layer(ctx: _Context, h: Var, W: Var, a_src: Var, a_dst: Var) -> Var:
    """Single-head attention aggregation restricted to neighbors plus self."""
    tape = ctx.tape
    Wh = tape.matmul(h, W)
    src = tape.matmul(tape.matmul(Wh, a_src), ctx.ones_row)           # e_ij <- a_src . Wh_i
    dst = tape.matmul(ctx.ones_col, tape.matmul(a_dst, Wh, trans_b=True))  # e_ij <- a_dst . Wh_j
    scores = tape.add(leaky_relu(tape, tape.add(src, dst)), ctx.mask)
    att = tape.softmax(scores)
    return tape.matmul(att, Wh)


def _checked(v: Var, layer: str) -> Var:
    if not np.all(np.isfinite(v.value)):
        raise NumericError(f"non-finite activations in layer {layer}")
    return v


def forward(params: ModelParams, config: BackboneConfig, X: np.ndarray, adj: SparseAdj,
            tape: Tape, stochastic: bool = False, rng: np.random.Generator | None = None
            ) -> ForwardOutput:
    """Record one forward pass of the backbone on ``tape``."""
    if X.shape[0] != adj.n:
        raise ContractError(f"features have {X.shape[0]} rows but adjacency has {adj.n} nodes")
    expected = _shapes(config, X.shape[1], params["W_out"].shape[1])
    for name, shape in expected.items():
        if name not in params.weights or params[name].shape != shape:
            raise ContractError(f"parameter {name} missing or mis-shaped (want {shape})")
    leaves = params.to_tape(tape)
    ctx = _Context(tape, adj)
    h = tape.const(X)

    if config.kind == "SGC":
        for _ in range(config.K):
            h = tape.spmm(adj, h)
    else:
        for l in range(config.layers - 1):
            if config.kind == "GCN":
                h = tape.relu(tape.spmm(adj, tape.matmul(h, leaves[f"W{l}"])))
            else:
                heads = [_gat_layer(ctx, h, leaves[f"W{l}_{k}"], leaves[f"att_src{l}_{k}"],
                                    leaves[f"att_dst{l}_{k}"]) for k in range(config.heads)]
                agg = heads[0]
                for other in heads[1:]:
                    agg = tape.add(agg, other)
                if config.heads > 1:
                    agg = tape.scale(agg, 1.0 / config.heads)
                h = tape.relu(agg)
            _checked(h, f"{config.kind}[{l}]")

    mu = logvar = None
    if config.bottleneck:
        mu = tape.matmul(h, leaves["W_mu"])
        logvar = tape.matmul(h, leaves["W_logvar"])
        if stochastic:
            if rng is None:
                raise ContractError("stochastic forward needs a random generator")
            eps = tape.const(rng.standard_normal(mu.shape))
            sigma = tape.exp(tape.scale(logvar, 0.5))
            h = tape.add(mu, tape.mul(sigma, eps))
        else:
            h = mu
        _checked(h, "bottleneck")

    if config.kind == "GCN":
        logits = tape.spmm(adj, tape.matmul(h, leaves["W_out"]))
    elif config.kind == "SGC":
        logits = tape.matmul(h, leaves["W_out"])
    else:
        logits = _gat_layer(ctx, h, leaves["W_out"], leaves["att_src_out"], leaves["att_dst_out"])
    _checked(logits, "output")
    return ForwardOutput(logits, tape.softmax(logits), mu, logvar, leaves)


def posteriors_for(params: ModelParams, config: BackboneConfig, X: np.ndarray,
                   adj: SparseAdj) -> np.ndarray:
    """Deterministic inference pass (bottleneck mean, no sampling)."""
    return forward(params, config, X, adj, Tape(), stochastic=False).posteriors.value


# ---------------------------------------------------------------- checkpoints
#
# Container layout (all integers little-endian):
#   b"GMIAPARM"  magic
#   u32          version (=1)
#   u32          metadata length, then that many bytes of UTF-8 JSON
#   u32          array count
#   per array:   u16 name length, UTF-8 name, u64 rows, u64 cols,
#                rows*cols float64 values in row-major order

MAGIC = b"GMIAPARM"
VERSION = 1


def dumps_params(params: ModelParams, meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    blob = json.dumps(meta or {}, sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(params.weights)))
    for name, arr in params.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<QQ", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_params(data: bytes) -> tuple[ModelParams, dict]:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise ValueError("not a parameter container (bad magic)")
    version, mlen = struct.unpack_from("<II", view, 8)
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    pos = 16
    meta = json.loads(bytes(view[pos:pos + mlen]).decode())
    pos += mlen
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    weights = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos:pos + nlen]).decode()
        pos += nlen
        rows, cols = struct.unpack_from("<QQ", view, pos)
        pos += 16
        size = rows * cols * 8
        weights[name] = np.frombuffer(bytes(view[pos:pos + size]), dtype="<f8").astype(np.float64).reshape(rows, cols)
        pos += size
    if pos != len(data):
        raise ValueError("trailing bytes after parameter container")
    return ModelParams(weights), meta


def save_params(path, params: ModelParams, config: BackboneConfig | None = None, **meta) -> None:
    if config is not None:
        meta["backbone"] = asdict(config)
    with open(path, "wb") as fh:
        fh.write(dumps_params(params, meta))


def load_params(path) -> tuple[ModelParams, dict]:
    with open(path, "rb") as fh:
        return loads_params(fh.read())
