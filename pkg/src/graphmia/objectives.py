"""Training objectives: cross-entropy, IRM penalty, bottleneck loss and risk extrapolation.

Functions taking :class:`~graphmia.diffcore.Var` record onto the operand's tape
and stay differentiable.  The risk combinators (``irm_total``, ``v_rex``,
``mm_rex``) accept either plain floats or tape variables.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .diffcore import ContractError, Tape, Var


@dataclass(frozen=True)
class ShadowLossConfig:
    alpha: float = 0.5
    beta1: float = 1.0
    xi: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ContractError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.beta1 < 0:
            raise ContractError(f"beta1 must be >= 0, got {self.beta1}")
        if self.xi < 0:
            raise ContractError(f"xi must be >= 0, got {self.xi}")


@dataclass(frozen=True)
class RExConfig:
    beta2: float = 1.0
    lambda_min: float = 0.0

    def __post_init__(self):
        if self.beta2 < 0:
            raise ContractError(f"beta2 must be >= 0, got {self.beta2}")


def one_hot(labels, C: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, C))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _rows(mask, n: int) -> np.ndarray:
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask) if mask.dtype == bool else mask.astype(np.int64)
    if rows.size == 0:
        raise ContractError("row mask selects no rows")
    if mask.dtype == bool and mask.size != n:
        raise ContractError(f"boolean mask of length {mask.size} for {n} rows")
    return rows


def erm_risk(logits: Var, labels, mask) -> Var:
    """Mean cross-entropy over the masked rows."""
    tape = logits.tape
    n, C = logits.shape
    rows = _rows(mask, n)
    Y = tape.const(one_hot(labels, C))
    if Y.shape != logits.shape:
        raise ContractError(f"labels {Y.shape} do not match logits {logits.shape}")
    logp = tape.log(tape.softmax(logits))
    return tape.scale(tape.sum(tape.masked_mean(tape.mul(logp, Y), rows)), -1.0)


def irm_gradient(logits: Var, labels, mask) -> Var:
    """d/dw of the masked cross-entropy of ``w * logits`` at ``w = 1``, in closed form."""
    tape = logits.tape
    n, C = logits.shape
    rows = _rows(mask, n)
    Y = tape.const(one_hot(labels, C))
    resid = tape.sub(tape.softmax(logits), Y)
    return tape.sum(tape.masked_mean(tape.mul(resid, logits), rows))


def irm_penalty(logits: Var, labels, mask) -> Var:
    """Squared gradient of the risk w.r.t. a dummy scalar classifier."""
    return logits.tape.square(irm_gradient(logits, labels, mask))


def kl_standard_normal(mu: Var, logvar: Var) -> Var:
    """Mean over nodes of KL(N(mu, sigma^2) || N(0, I))."""
    if mu.shape != logvar.shape:
        raise ContractError(f"mu {mu.shape} and logvar {logvar.shape} differ in shape")
    tape = mu.tape
    n, d = mu.shape
    ones = tape.const(np.ones(mu.shape))
    inner = tape.sub(tape.sub(tape.add(tape.square(mu), tape.exp(logvar)), ones), logvar)
    # analytically >= 0 per entry; relu removes rounding negatives
    inner = tape.relu(inner)
    return tape.scale(tape.sum(inner), 0.5 / n)


def gib_loss(class_risk: Var, mu: Var | None, logvar: Var | None, xi: float) -> Var:
    """Classification risk plus ``xi`` times the bottleneck KL."""
    if mu is None or logvar is None or xi == 0:
        if (mu is None) != (logvar is None):
            raise ContractError("mu and logvar must both be given or both omitted")
        if mu is not None and mu.shape != logvar.shape:
            raise ContractError(f"mu {mu.shape} and logvar {logvar.shape} differ in shape")
        return class_risk
    tape = class_risk.tape
    return tape.add(class_risk, tape.scale(kl_standard_normal(mu, logvar), xi))


Scalar = Union[float, Var]


def _is_var(x) -> bool:
    return isinstance(x, Var)


def _tape_of(values: Sequence[Scalar]) -> Tape | None:
    for v in values:
        if _is_var(v):
            return v.tape
    return None


def _lift(tape: Tape, v: Scalar) -> Var:
    return v if _is_var(v) else tape.const(float(v))


def _sum(values: Sequence[Scalar]) -> Scalar:
    tape = _tape_of(values)
    if tape is None:
        return float(np.sum(np.asarray(values, dtype=np.float64)))
    total = _lift(tape, values[0])
    for v in values[1:]:
        total = tape.add(total, _lift(tape, v))
    return total


def _scale(x: Scalar, c: float) -> Scalar:
    return x.tape.scale(x, c) if _is_var(x) else c * float(x)


def _add(a: Scalar, b: Scalar) -> Scalar:
    tape = _tape_of([a, b])
    if tape is None:
        return float(a) + float(b)
    return tape.add(_lift(tape, a), _lift(tape, b))


def irm_total(risks: Sequence[Scalar], penalties: Sequence[Scalar], beta1: float) -> Scalar:
    """Sum of environment risks plus ``beta1`` times the summed penalties."""
    if len(risks) != len(penalties):
        raise ContractError(f"{len(risks)} risks but {len(penalties)} penalties")
    if not risks:
        raise ContractError("no environments")
    if beta1 == 0:
        return _sum(risks)
    return _add(_sum(risks), _scale(_sum(penalties), beta1))


def shadow_total(gib: Scalar, irm: Scalar, alpha: float) -> Scalar:
    """``alpha * gib + (1 - alpha) * irm``."""
    if not 0.0 <= alpha < 1.0:
        raise ContractError(f"alpha must lie in [0, 1), got {alpha}")
    if alpha == 0:
        return irm
    return _add(_scale(gib, alpha), _scale(irm, 1.0 - alpha))


def attack_ce(attack_logits: Var, membership) -> Var:
    """Mean two-class cross-entropy over all records."""
    membership = np.asarray(membership, dtype=np.int64)
    if membership.size == 0:
        raise ContractError("empty attack batch")
    if np.any((membership != 0) & (membership != 1)):
        raise ContractError("membership labels must be binary")
    if attack_logits.shape[1] != 2:
        raise ContractError(f"attack logits need 2 columns, got {attack_logits.shape}")
    return erm_risk(attack_logits, membership, np.arange(membership.size))


def v_rex(risks: Sequence[Scalar], beta2: float) -> Scalar:
    """``beta2 * Var(risks) + sum(risks)`` with population variance."""
    M = len(risks)
    if M == 0:
        raise ContractError("no environment risks")
    tape = _tape_of(risks)
    if tape is None:
        # sorted so the float result is exactly permutation invariant
        r = np.sort(np.asarray(risks, dtype=np.float64))
        return float(beta2 * np.mean((r - r.mean()) ** 2) + r.sum())
    total = _sum(risks)
    if beta2 == 0:
        return total
    mean = tape.scale(total, 1.0 / M)
    sq = [tape.square(tape.sub(_lift(tape, r), mean)) for r in risks]
    return tape.add(tape.scale(_sum(sq), beta2 / M), total)


def mm_rex(risks: Sequence[Scalar], lambda_min: float) -> Scalar:
    """Worst-case affine risk: ``(1 - M lambda_min) max R + lambda_min sum R``.

    Tape inputs are differentiated through the arg-max environment.
    """
    M = len(risks)
    if M == 0:
        raise ContractError("no environment risks")
    if lambda_min > 1.0 / M:
        raise ContractError(f"lambda_min={lambda_min} exceeds 1/M={1.0 / M}")
    vals = [float(r.value[0, 0]) if _is_var(r) else float(r) for r in risks]
    worst = risks[int(np.argmax(vals))]
    if _tape_of(risks) is None:
        return (1.0 - M * lambda_min) * max(vals) + lambda_min * float(np.sum(vals))
    return _add(_scale(worst, 1.0 - M * lambda_min), _scale(_sum(risks), lambda_min))
