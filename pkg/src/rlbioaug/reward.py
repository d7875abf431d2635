"""Soft-KNN consistency reward against a labeled reference bank."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ReferenceSet:
    embeddings: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.embeddings = np.atleast_2d(np.asarray(self.embeddings, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.embeddings):
            raise ValueError("reference embeddings and labels must be aligned")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("reference labels must lie in [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)


def _unit_rows(a: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.maximum(norm, eps)


def soft_knn_class_probs(z, ref: ReferenceSet, k_neighbors: int = 20, tau_knn: float = 0.1) -> np.ndarray:
    """Class distribution from a temperature softmax over the k most cosine-similar references.

    ``z`` may be one embedding (d,) or a batch (B, d); the result has a matching
    leading shape with ``n_classes`` columns.  Ties at the k-th similarity go to
    the lower reference index.
    """
    if len(ref) == 0:
        raise ValueError("empty reference set")
    if not 1 <= k_neighbors <= len(ref):
        raise ValueError(f"k_neighbors={k_neighbors} must be in [1, {len(ref)}]")
    if tau_knn <= 0:
        raise ValueError(f"tau_knn must be > 0, got {tau_knn}")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    sims = _unit_rows(np.atleast_2d(z)) @ _unit_rows(ref.embeddings).T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k_neighbors]
    top = np.take_along_axis(sims, order, axis=1) / tau_knn
    w = np.exp(top - top.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    probs = np.zeros((len(sims), ref.n_classes))
    np.add.at(probs, (np.repeat(np.arange(len(sims)), k_neighbors), ref.labels[order].ravel()), w.ravel())
    return probs[0] if single else probs


def reward(z, y_true, ref: ReferenceSet, k_neighbors: int = 20, tau_knn: float = 0.1):
    """Soft-KNN probability of the true class, in [0, 1]; batched when ``z`` is (B, d)."""
    y = np.asarray(y_true, dtype=np.int64)
    if np.any((y < 0) | (y >= ref.n_classes)):
        raise ValueError(f"class id(s) {y} outside [0, {ref.n_classes})")
    probs = soft_knn_class_probs(z, ref, k_neighbors, tau_knn)
    if probs.ndim == 1:
        return float(probs[int(y)])
    return probs[np.arange(len(probs)), y]


def accuracy_reward(z, y_true, ref: ReferenceSet, k_neighbors: int = 20, tau_knn: float = 0.1):
    """Sparse counterpart: 1 when the Soft-KNN argmax class is the true class, else 0."""
    probs = np.atleast_2d(soft_knn_class_probs(z, ref, k_neighbors, tau_knn))
    hit = (np.argmax(probs, axis=1) == np.atleast_1d(y_true)).astype(np.float64)
    return float(hit[0]) if np.ndim(z) == 1 else hit
