"""Slice-level detection metrics (AUROC, AUPR) and the Dice overlap for localization."""

from __future__ import annotations

import numpy as np


def _labeled(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels must have the same length")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 (normal) or 1 (abnormal)")
    return s, y.astype(np.int64)


def _sweep(s: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (true positives, false positives) at each distinct score, descending."""
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    return tp, fp


def auroc(scores, labels) -> float:
    """Area under the ROC curve; a tie between an abnormal and a normal slice counts one half."""
    s, y = _labeled(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs both normal and abnormal samples")
    tp, fp = _sweep(s, y)
    tpr = np.r_[0, tp] / n_pos
    fpr = np.r_[0, fp] / n_neg
    # trapezoids over tied blocks give exactly the half-credit convention
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def aupr(scores, labels) -> float:
    """Step-wise area under the precision-recall curve, sum of precision * delta recall."""
    s, y = _labeled(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("AUPR needs at least one abnormal sample")
    tp, fp = _sweep(s, y)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0, recall]) * precision))


def dsc(pred, truth) -> float:
    p = np.asarray(getattr(pred, "bits", pred)) != 0
    t = np.asarray(getattr(truth, "bits", truth)) != 0
    if p.shape != t.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {t.shape}")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


def summarize(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot summarize an empty list")
    return float(v.mean()), float(v.std())
