"""Classification metrics: rank-based AUC, macro-F1, accuracy, confusion counts."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.stats import rankdata


class EvalSplit(str, Enum):
    VAL = "val"
    TEST = "test"


def auc(scores, labels) -> float:
    """Rank statistic equal to the probability a positive outranks a negative.

    Computed from average ranks, which handles ties as half-wins and agrees
    exactly with the O(n^2) pairwise comparison.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if not np.isfinite(scores).all():
        raise ValueError("scores must be finite")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError(f"AUC needs both classes present, got {n_pos} positives / {n_neg} negatives")
    ranks = rankdata(scores)
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_counts(preds, labels) -> np.ndarray:
    """2x2 counts indexed [actual, predicted]."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    counts = np.zeros((2, 2), dtype=np.int64)
    for actual in (0, 1):
        for predicted in (0, 1):
            counts[actual, predicted] = int(((labels == actual) & (preds == predicted)).sum())
    return counts


def _f1_for_class(counts: np.ndarray, cls: int) -> float:
    tp = counts[cls, cls]
    fp = counts[1 - cls, cls]
    fn = counts[cls, 1 - cls]
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def macro_f1(preds, labels) -> float:
    """Unweighted mean of per-class F1; zero denominators contribute F1 = 0."""
    counts = confusion_counts(preds, labels)
    return float((_f1_for_class(counts, 0) + _f1_for_class(counts, 1)) / 2.0)


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    return float((preds == labels).mean())


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    macro_f1: float
    accuracy: float
    split: EvalSplit
    n: int
    confusion: tuple[tuple[int, int], tuple[int, int]]

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "split": self.split.value,
            "n": self.n,
            "confusion": [list(row) for row in self.confusion],
        }


def compute_metrics(scores, preds, labels, split: EvalSplit) -> MetricsReport:
    """All metrics from one prediction set over one split."""
    counts = confusion_counts(preds, labels)
    return MetricsReport(
        auc=auc(scores, labels),
        macro_f1=macro_f1(preds, labels),
        accuracy=accuracy(preds, labels),
        split=split,
        n=len(np.asarray(labels)),
        confusion=tuple(tuple(int(v) for v in row) for row in counts),
    )
