"""Accuracy and partition-agreement metrics."""

from __future__ import annotations

import numpy as np


def accuracy(predict_fn, X, y) -> float:
    """Fraction of samples whose predicted label equals y."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    pred = np.asarray(predict_fn(X))
    return float(np.mean(pred == y))


def per_group_accuracy(pred, y, groups) -> dict:
    """Accuracy per group id; groups with no samples are absent."""
    pred, y, groups = np.asarray(pred), np.asarray(y), np.asarray(groups)
    out = {}
    for g in np.unique(groups):
        sel = groups == g
        out[int(g)] = float(np.mean(pred[sel] == y[sel]))
    return out


def worst_group_accuracy(pred, y, groups) -> float:
    return min(per_group_accuracy(pred, y, groups).values())


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-corrected agreement between two partitions of the same items."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("label vectors must be 1-d and the same length")
    n = len(a)
    if n == 0:
        raise ValueError("ARI of an empty labeling is undefined")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na, nb = ai.max() + 1, bi.max() + 1
    contingency = np.zeros((na, nb), dtype=np.int64)
    np.add.at(contingency, (ai, bi), 1)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(contingency).sum()
    sum_a = comb2(contingency.sum(axis=1)).sum()
    sum_b = comb2(contingency.sum(axis=0)).sum()
    total = comb2(n)
    expected = sum_a * sum_b / total if total > 0 else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions put everything in one cluster (or are singletons)
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))
