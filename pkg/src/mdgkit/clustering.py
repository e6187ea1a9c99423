"""Lloyd's k-means with k-means++ seeding.

Deterministic per seed, converges when the largest centroid shift drops
below 1e-8 (or after 300 sweeps). An emptied cluster is re-seeded at the
point currently farthest from its assigned centroid.
"""

from __future__ import annotations

import numpy as np

MAX_ITER = 300
SHIFT_TOL = 1e-8


def _sq_dists(Z, centroids):
    # (n, m) squared distances without forming (n, m, d)
    return (
        (Z * Z).sum(axis=1)[:, None]
        - 2.0 * Z @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )


def _seed_centroids(Z, M, rng):
    n = Z.shape[0]
    centroids = np.empty((M, Z.shape[1]))
    centroids[0] = Z[rng.integers(n)]
    d2 = ((Z - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, M):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2 / total), rng.random()))
            idx = min(idx, n - 1)
        centroids[j] = Z[idx]
        d2 = np.minimum(d2, ((Z - centroids[j]) ** 2).sum(axis=1))
    return centroids


def _lloyd(Z, M, rng):
    n = Z.shape[0]
    centroids = _seed_centroids(Z, M, rng)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(MAX_ITER):
        dists = _sq_dists(Z, centroids)
        labels = np.argmin(dists, axis=1).astype(np.int64)
        assigned = dists[np.arange(n), labels]
        new_centroids = centroids.copy()
        taken = set()
        for k in range(M):
            sel = labels == k
            if sel.any():
                new_centroids[k] = Z[sel].mean(axis=0)
            else:
                order = np.argsort(-assigned)
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                new_centroids[k] = Z[pick]
                labels[pick] = k
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < SHIFT_TOL:
            break
    inertia = float(_sq_dists(Z, centroids)[np.arange(n), labels].sum())
    return labels, inertia


def kmeans_cluster(Z, M: int, seed: int, n_init: int = 5) -> np.ndarray:
    """Cluster rows of Z into M groups; returns one label in [0, M) per row.

    Runs n_init seeded restarts and keeps the lowest-inertia solution
    (ties to the earliest restart), so the result is still deterministic
    per seed but robust to unlucky seeding.
    """
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError("expected a 2-d feature matrix")
    if Z.shape[0] < M:
        raise ValueError(f"cannot form {M} clusters from {Z.shape[0]} points")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    best_labels, best_inertia = None, np.inf
    for child in ss.spawn(n_init):
        labels, inertia = _lloyd(Z, M, np.random.default_rng(child))
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return best_labels
