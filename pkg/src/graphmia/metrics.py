"""Attack quality metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .diffcore import ContractError

THRESHOLD = 0.5


def _binary_pair(labels, truth) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labels).astype(np.int64).ravel()
    truth = np.asarray(truth).astype(np.int64).ravel()
    if labels.size != truth.size:
        raise ContractError(f"length mismatch: {labels.size} predictions vs {truth.size} truths")
    if truth.size == 0:
        raise ContractError("metrics need at least one record")
    for arr in (labels, truth):
        if np.any((arr != 0) & (arr != 1)):
            raise ContractError("labels must be binary")
    return labels, truth


def accuracy(labels, truth) -> float:
    labels, truth = _binary_pair(labels, truth)
    return float(np.mean(labels == truth))


def recall(labels, truth) -> float:
    labels, truth = _binary_pair(labels, truth)
    pos = truth == 1
    if not pos.any():
        return 0.0
    return float(np.sum(labels[pos] == 1) / pos.sum())


def auc(scores, truth) -> float:
    """Mann-Whitney AUC from midranks; tied pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).astype(np.int64).ravel()
    if scores.size != truth.size:
        raise ContractError(f"length mismatch: {scores.size} scores vs {truth.size} truths")
    pos = truth == 1
    n_pos = int(pos.sum())
    n_neg = truth.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both members and non-members in the truth vector")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    auc: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    seed: int | None = None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def report(scores, truth, seed: int | None = None, threshold: float = THRESHOLD) -> MetricsReport:
    """All metrics for membership scores thresholded at ``threshold`` (ties -> non-member)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = (scores > threshold).astype(np.int64)
    labels, truth = _binary_pair(labels, truth)
    tp = int(np.sum((labels == 1) & (truth == 1)))
    fp = int(np.sum((labels == 1) & (truth == 0)))
    tn = int(np.sum((labels == 0) & (truth == 0)))
    fn = int(np.sum((labels == 0) & (truth == 1)))
    return MetricsReport(accuracy(labels, truth), auc(scores, truth), recall(labels, truth),
                         tp, fp, tn, fn, seed)
