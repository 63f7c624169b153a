from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata


class UndefinedAUCError(ValueError):
    pass


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError(f"scores and labels differ in length: {s.shape} vs {y.shape}")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    return s, y.astype(bool)


def auc(scores, labels) -> float:
    """Mann-Whitney U / (n_pos * n_neg); tied pairs count one half."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # first entry is +inf

    def area(self) -> float:
        return float(np.trapezoid(self.tpr, self.fpr))


def roc_curve(scores, labels) -> RocCurve:
    """One point per distinct score (predict positive when ``score >= threshold``)."""
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError(f"ROC undefined with {n_pos} positives and {n_neg} negatives")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # last index of each run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    fpr = np.r_[0.0, fp[last] / n_neg]
    tpr = np.r_[0.0, tp[last] / n_pos]
    thresholds = np.r_[np.inf, s_sorted[last]]
    return RocCurve(fpr, tpr, thresholds)


def tpr_at(curve: RocCurve, grid: np.ndarray) -> np.ndarray:
    """Right-continuous linear interpolation of TPR on an FPR grid."""
    fpr, tpr = curve.fpr, curve.tpr
    idx = np.searchsorted(fpr, grid, side="right") - 1
    idx = np.clip(idx, 0, fpr.size - 1)
    nxt = np.minimum(idx + 1, fpr.size - 1)
    span = fpr[nxt] - fpr[idx]
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(span > 0, (grid - fpr[idx]) / span, 0.0)
    return tpr[idx] + w * (tpr[nxt] - tpr[idx])


def mean_roc(curves: list[RocCurve], points: int = 101) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vertical averaging: mean and std of TPR on a uniform FPR grid."""
    grid = np.linspace(0.0, 1.0, points)
    stack = np.stack([tpr_at(c, grid) for c in curves])
    mean = stack.mean(axis=0)
    mean[0] = 0.0
    mean[-1] = 1.0
    return grid, mean, stack.std(axis=0)


@dataclass
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    precision_undefined: bool
    f1_undefined: bool
    threshold: float

    def to_json(self) -> dict:
        return dict(vars(self))


def classification_metrics(scores, labels, threshold: float = 0.5) -> ClassificationMetrics:
    """Confusion-matrix metrics with ``score >= threshold`` predicted positive.

    Precision/F1 with a zero denominator are reported as 0 and flagged.
    """
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    acc = float(np.mean(pred == y))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1_den = 2 * tp + fp + fn
    f1 = 2 * tp / f1_den if f1_den else 0.0
    return ClassificationMetrics(
        accuracy=acc,
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        precision_undefined=tp + fp == 0,
        f1_undefined=f1_den == 0,
        threshold=float(threshold),
    )


def probability_histogram(scores, labels, bins: int = 10) -> dict:
    """Per-class counts over ``bins`` uniform bins on [0, 1] (last bin closed)."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    s, y = _check(scores, labels)
    idx = np.clip(np.floor(s * bins).astype(int), 0, bins - 1)
    edges = np.linspace(0.0, 1.0, bins + 1)
    return {
        "lower": edges[:-1],
        "upper": edges[1:],
        "negative": np.bincount(idx[~y], minlength=bins),
        "positive": np.bincount(idx[y], minlength=bins),
    }
