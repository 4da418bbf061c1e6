"""Define-by-run reverse-mode differentiation over dense float64 matrices.

Every value lives on a :class:`Tape` as a 2-D ``numpy`` array.  Operations are
recorded eagerly in execution order, so the tape is topologically sorted by
construction and :meth:`Tape.backward` is a single reverse sweep.

Graph propagation uses :class:`SparseAdj`, a symmetric compressed-row matrix
that is treated as a constant (no gradient flows into adjacency weights).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

LOG_FLOOR = 1e-12


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class NumericError(FloatingPointError):
    """Raised when a forward value stops being finite."""


class SparseAdj:
    """Symmetric, non-negative sparse matrix stored in CSR form."""

    __slots__ = ("csr",)

    def __init__(self, csr: sp.csr_matrix, check: bool = True):
        csr = sp.csr_matrix(csr, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        if check:
            if csr.shape[0] != csr.shape[1]:
                raise ContractError(f"adjacency must be square, got {csr.shape}")
            if not np.all(np.isfinite(csr.data)) or np.any(csr.data < 0):
                raise ContractError("adjacency weights must be finite and non-negative")
            if (csr != csr.T).nnz:
                raise ContractError("adjacency must be symmetric")
        self.csr = csr

    @classmethod
    def from_triplets(cls, n: int, rows, cols, weights) -> "SparseAdj":
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size and (rows.max() >= n or cols.max() >= n or min(rows.min(), cols.min()) < 0):
            raise ContractError(f"triplet index out of range for n={n}")
        return cls(sp.csr_matrix((np.asarray(weights, float), (rows, cols)), shape=(n, n)))

    @classmethod
    def identity(cls, n: int) -> "SparseAdj":
        return cls(sp.identity(n, format="csr", dtype=np.float64), check=False)

    @property
    def n(self) -> int:
        return self.csr.shape[0]

    @property
    def nnz(self) -> int:
        return self.csr.nnz

    def triplets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        coo = self.csr.tocoo()
        return coo.row, coo.col, coo.data

    def toarray(self) -> np.ndarray:
        return self.csr.toarray()

    def __matmul__(self, other: np.ndarray) -> np.ndarray:
        return np.asarray(self.csr @ other)


@dataclass(frozen=True)
class Var:
    """Handle to a value recorded on a tape."""

    tape: "Tape"
    idx: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __add__(self, other: "Var") -> "Var":
        return self.tape.add(self, other)

    def __sub__(self, other: "Var") -> "Var":
        return self.tape.sub(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return self.tape.mul(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        return self.tape.matmul(self, other)


Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ContractError(f"expected a matrix, got ndim={arr.ndim}")
    return arr


class Tape:
    """Records operations for one forward pass and replays them backwards."""

    def __init__(self):
        self.values: list[np.ndarray] = []
        # per value: (operand indices, backward closure) or None for leaves/constants
        self._records: list[tuple[tuple[int, ...], Backward] | None] = []
        self._leaves: list[int] = []
        self.kinds: list[str] = []

    def __len__(self) -> int:
        return len(self.values)

    def _push(self, kind: str, value: np.ndarray, record) -> Var:
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite result in op '{kind}'")
        self.values.append(value)
        self._records.append(record)
        self.kinds.append(kind)
        return Var(self, len(self.values) - 1)

    def _own(self, *vs: Var) -> None:
        for v in vs:
            if not isinstance(v, Var) or v.tape is not self:
                raise ContractError("operand is not recorded on this tape")

    def leaf(self, value) -> Var:
        """Register a differentiable input."""
        v = self._push("leaf", _as_matrix(value), None)
        self._leaves.append(v.idx)
        return v

    def const(self, value) -> Var:
        """Register a constant input; it receives no gradient."""
        return self._push("const", _as_matrix(value), None)

    def record_op(self, kind: str, *operands, **attrs) -> Var:
        """Generic entry point: dispatch ``kind`` to the matching op method."""
        try:
            fn = getattr(self, _OP_KINDS[kind])
        except KeyError:
            raise ContractError(f"unknown op kind '{kind}'") from None
        return fn(*operands, **attrs)

    # ------------------------------------------------------------------ ops

    def matmul(self, a: Var, b: Var, trans_b: bool = False) -> Var:
        self._own(a, b)
        A, B = a.value, b.value
        Bm = B.T if trans_b else B
        if A.shape[1] != Bm.shape[0]:
            raise ContractError(f"matmul shape mismatch: {A.shape} @ {Bm.shape}"
                                + (" (b transposed)" if trans_b else ""))

        def back(g):
            ga = g @ Bm.T
            gb = A.T @ g
            return ga, (gb.T if trans_b else gb)

        with np.errstate(over="ignore", invalid="ignore"):  # reported by _push instead
            out = A @ Bm
        return self._push("matmul", out, ((a.idx, b.idx), back))

    def spmm(self, adj: SparseAdj, x: Var) -> Var:
        self._own(x)
        X = x.value
        if adj.n != X.shape[0]:
            raise ContractError(f"spmm shape mismatch: ({adj.n}, {adj.n}) @ {X.shape}")
        csr = adj.csr

        def back(g):
            # adjacency is symmetric, so A^T g == A g
            return (np.asarray(csr.T @ g),)

        return self._push("spmm", np.asarray(csr @ X), ((x.idx,), back))

    def _same_shape(self, kind: str, a: Var, b: Var) -> None:
        self._own(a, b)
        if a.shape != b.shape:
            raise ContractError(f"{kind} shape mismatch: {a.shape} vs {b.shape}")

    def add(self, a: Var, b: Var) -> Var:
        self._same_shape("add", a, b)
        return self._push("add", a.value + b.value, ((a.idx, b.idx), lambda g: (g, g)))

    def sub(self, a: Var, b: Var) -> Var:
        self._same_shape("sub", a, b)
        return self._push("sub", a.value - b.value, ((a.idx, b.idx), lambda g: (g, -g)))

    def mul(self, a: Var, b: Var) -> Var:
        self._same_shape("mul", a, b)
        A, B = a.value, b.value
        return self._push("mul", A * B, ((a.idx, b.idx), lambda g: (g * B, g * A)))

    def scale(self, a: Var, c: float) -> Var:
        self._own(a)
        c = float(c)
        return self._push("scale", c * a.value, ((a.idx,), lambda g: (c * g,)))

    def softmax(self, a: Var) -> Var:
        """Row-wise softmax with per-row max subtraction."""
        self._own(a)
        Z = a.value - a.value.max(axis=1, keepdims=True)
        E = np.exp(Z)
        P = E / E.sum(axis=1, keepdims=True)

        def back(g):
            return (P * (g - (g * P).sum(axis=1, keepdims=True)),)

        return self._push("softmax", P, ((a.idx,), back))

    def log(self, a: Var) -> Var:
        """Natural log with inputs clamped below at ``LOG_FLOOR``."""
        self._own(a)
        A = a.value
        live = A >= LOG_FLOOR
        safe = np.where(live, A, LOG_FLOOR)
        return self._push("log", np.log(safe), ((a.idx,), lambda g: (np.where(live, g / safe, 0.0),)))

    def exp(self, a: Var) -> Var:
        self._own(a)
        with np.errstate(over="ignore"):
            E = np.exp(a.value)
        return self._push("exp", E, ((a.idx,), lambda g: (g * E,)))

    def relu(self, a: Var) -> Var:
        self._own(a)
        on = a.value > 0
        return self._push("relu", np.where(on, a.value, 0.0), ((a.idx,), lambda g: (g * on,)))

    def square(self, a: Var) -> Var:
        self._own(a)
        A = a.value
        return self._push("square", A * A, ((a.idx,), lambda g: (2.0 * A * g,)))

    def sigmoid(self, a: Var) -> Var:
        self._own(a)
        S = 0.5 * (1.0 + np.tanh(0.5 * a.value))
        return self._push("sigmoid", S, ((a.idx,), lambda g: (g * S * (1.0 - S),)))

    def take_rows(self, a: Var, index) -> Var:
        self._own(a)
        idx = np.asarray(index, dtype=np.int64)
        shape = a.shape
        if idx.size and (idx.min() < -shape[0] or idx.max() >= shape[0]):
            raise ContractError(f"row index out of range for shape {shape}")

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return self._push("take_rows", a.value[idx], ((a.idx,), back))

    def take_cols(self, a: Var, index) -> Var:
        self._own(a)
        idx = np.asarray(index, dtype=np.int64)
        shape = a.shape
        if idx.size and (idx.min() < -shape[1] or idx.max() >= shape[1]):
            raise ContractError(f"column index out of range for shape {shape}")

        def back(g):
            out = np.zeros(shape)
            np.add.at(out.T, idx, g.T)
            return (out,)

        return self._push("take_cols", a.value[:, idx], ((a.idx,), back))

    def masked_mean(self, a: Var, rows) -> Var:
        """Mean over the selected rows; returns a ``1 x cols`` matrix."""
        self._own(a)
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            raise ContractError("masked_mean over an empty row set")
        shape = a.shape
        k = rows.size

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, rows, np.broadcast_to(g / k, (k, shape[1])))
            return (out,)

        return self._push("masked_mean", a.value[rows].mean(axis=0, keepdims=True), ((a.idx,), back))

    def sum(self, a: Var) -> Var:
        self._own(a)
        shape = a.shape
        return self._push("sum", np.array([[a.value.sum()]]),
                          ((a.idx,), lambda g: (np.full(shape, g[0, 0]),)))

    # ------------------------------------------------------------ backward

    def backward(self, loss: Var) -> dict[Var, np.ndarray]:
        """Gradients of a scalar ``loss`` with respect to every leaf."""
        self._own(loss)
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 loss, got {loss.shape}")
        grads: list[np.ndarray | None] = [None] * (loss.idx + 1)
        grads[loss.idx] = np.ones((1, 1))
        with np.errstate(over="ignore", invalid="ignore"):
            self._accumulate(grads, loss.idx)
        out = {}
        for i in self._leaves:
            g = grads[i] if i < len(grads) and grads[i] is not None else np.zeros_like(self.values[i])
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for leaf {i}")
            out[Var(self, i)] = g
        return out

    def _accumulate(self, grads: list, top: int) -> None:
        for i in range(top, -1, -1):
            g = grads[i]
            rec = self._records[i]
            if g is None or rec is None:
                continue
            operands, back = rec
            for j, gj in zip(operands, back(g)):
                if gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj


_OP_KINDS = {
    "matmul": "matmul",
    "spmm": "spmm",
    "add": "add",
    "mul": "mul",
    "scale": "scale",
    "softmax": "softmax",
    "log": "log",
    "exp": "exp",
    "relu": "relu",
    "square": "square",
    "take_rows": "take_rows",
    "take_cols": "take_cols",
    "masked_mean": "masked_mean",
    "sum": "sum",
    "sub": "sub",
    "sigmoid": "sigmoid",
}
OP_KINDS = frozenset(_OP_KINDS)
