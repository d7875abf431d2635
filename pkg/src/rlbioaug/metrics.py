"""Confusion-matrix metrics: balanced accuracy and macro F1."""
from __future__ import annotations

import warnings

import numpy as np


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def _check(cm) -> np.ndarray:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.size == 0:
        raise ValueError(f"confusion matrix must be non-empty and square, got shape {cm.shape}")
    return cm


def per_class(cm) -> dict[str, np.ndarray]:
    """Precision, recall and F1 per class (rows = true class, columns = prediction)."""
    cm = _check(cm)
    tp = np.diag(cm)
    actual = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return {"precision": precision, "recall": recall, "f1": f1}


def balanced_accuracy(cm) -> float:
    """Mean per-class recall; every class must have at least one true sample."""
    cm = _check(cm)
    actual = cm.sum(axis=1)
    if np.any(actual == 0):
        raise ValueError(f"class(es) {np.flatnonzero(actual == 0).tolist()} have no true samples")
    return float(np.mean(np.diag(cm) / actual))


def macro_f1(cm) -> float:
    """Unweighted mean of per-class F1; a class never predicted nor present scores 0."""
    cm = _check(cm)
    empty = (cm.sum(axis=0) == 0) & (cm.sum(axis=1) == 0)
    if np.any(empty):
        warnings.warn(f"macro_f1: class(es) {np.flatnonzero(empty).tolist()} absent; F1 taken as 0",
                      RuntimeWarning, stacklevel=2)
    return float(np.mean(per_class(cm)["f1"]))
