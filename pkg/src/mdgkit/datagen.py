"""Synthetic multi-domain datasets, splits, batch sampling and augmentation.

Datasets are columnar: features, class labels, the declared domain id, a
mutable inferred group id (initialized to the domain id) and, for
generated data, the generator's hidden ground-truth group. Trainers only
ever receive a :class:`TrainView`, which deliberately has no
``latent_group`` field; the hidden labels exist purely so evaluation code
can score recovered groupings.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    domain_id: np.ndarray
    group_id: np.ndarray
    latent_group: Optional[np.ndarray] = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        self.domain_id = np.ascontiguousarray(self.domain_id, dtype=np.int64)
        self.group_id = np.ascontiguousarray(self.group_id, dtype=np.int64)
        if self.latent_group is not None:
            self.latent_group = np.ascontiguousarray(self.latent_group, dtype=np.int64)
        n = len(self.y)
        if not (self.X.shape[0] == n == len(self.domain_id) == len(self.group_id)):
            raise ValueError("column lengths disagree")

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def num_domains(self) -> int:
        return int(self.domain_id.max()) + 1

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1

    def train_view(self) -> "TrainView":
        """What trainers are allowed to see. group_id is shared, not copied,
        so group re-labeling through the view is visible on the dataset."""
        return TrainView(self.X, self.y, self.domain_id, self.group_id)

    def restrict_to_domains(self, domains) -> "Dataset":
        """Keep only the given domains, re-numbered 0..len(domains)-1 in the
        given order; group ids are re-initialized to the new domain ids."""
        domains = list(domains)
        parts = [np.flatnonzero(self.domain_id == d) for d in domains]
        idx = np.concatenate(parts)
        new_dom = np.concatenate([np.full(len(p), i, dtype=np.int64) for i, p in enumerate(parts)])
        return Dataset(
            self.X[idx].copy(),
            self.y[idx].copy(),
            new_dom,
            new_dom.copy(),
            None if self.latent_group is None else self.latent_group[idx].copy(),
        )

    def domain_indices(self, d: int) -> np.ndarray:
        return np.flatnonzero(self.domain_id == d)


@dataclass
class TrainView:
    """Trainer-visible columns of a dataset (no generator ground truth)."""

    X: np.ndarray
    y: np.ndarray
    domain_id: np.ndarray
    group_id: np.ndarray

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def num_domains(self) -> int:
        return int(self.domain_id.max()) + 1

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------


def generate_rotated_moons(K, angles_deg, n_per_domain, noise_sd, seed) -> Dataset:
    """K two-moon domains, domain k rotated by angles_deg[k] about the
    pattern center. latent_group equals the domain id."""
    if K < 2:
        raise ValueError("need at least two domains")
    if len(angles_deg) != K:
        raise ValueError(f"expected {K} angles, got {len(angles_deg)}")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    rng = np.random.default_rng(seed)
    center = np.array([0.5, 0.25])
    xs, ys, doms = [], [], []
    for k in range(K):
        n0 = n_per_domain // 2
        n1 = n_per_domain - n0
        t0 = rng.uniform(0.0, np.pi, n0)
        t1 = rng.uniform(0.0, np.pi, n1)
        pts = np.concatenate(
            [
                np.column_stack([np.cos(t0), np.sin(t0)]),
                np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)]),
            ]
        )
        if noise_sd > 0:
            pts = pts + rng.normal(0.0, noise_sd, pts.shape)
        theta = np.deg2rad(angles_deg[k])
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        pts = (pts - center) @ rot.T + center
        xs.append(pts)
        ys.append(np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)]))
        doms.append(np.full(n_per_domain, k, dtype=np.int64))
    X = np.vstack(xs)
    y = np.concatenate(ys)
    dom = np.concatenate(doms)
    return Dataset(X, y, dom, dom.copy(), dom.copy())


def generate_latent_group_blobs(
    true_groups,
    K_declared,
    n,
    separation,
    shuffle_declared,
    seed,
    minority_frac=0.1,
) -> Dataset:
    """Well-separated Gaussian clusters whose membership is the hidden group.

    Cluster centers are spaced ``separation`` apart along the second axis
    (unit within-cluster noise). The class label is the sign of the
    first-axis offset from the cluster center, flipped for the last
    cluster, which also only holds ``minority_frac`` of the samples.
    Pooled training therefore latches onto the one rule that explains the
    majority clusters and mispredicts the minority cluster until enough
    gradient mass reaches it — the regime where recovered groups carry
    information the declared labels may not.

    With ``shuffle_declared`` the declared domain id is drawn uniformly at
    random, carrying no information about the hidden groups; otherwise it
    equals ``latent_group % K_declared``.
    """
    if true_groups < 2:
        raise ValueError("need at least two latent groups")
    if separation <= 0:
        raise ValueError("separation must be positive")
    if not 0 < minority_frac < 1:
        raise ValueError("minority_frac must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    G = true_groups
    n_min = max(int(round(minority_frac * n)), 2)
    base, extra = divmod(n - n_min, G - 1)
    sizes = [base + (1 if g < extra else 0) for g in range(G - 1)] + [n_min]
    heights = separation * (np.arange(G) - (G - 1) / 2.0)
    centers = np.column_stack([np.zeros(G), heights])
    xs, ys, lat = [], [], []
    for g in range(G):
        offsets = rng.standard_normal((sizes[g], 2))
        sign = 1.0 if g < G - 1 else -1.0
        xs.append(centers[g] + offsets)
        ys.append((sign * offsets[:, 0] > 0).astype(np.int64))
        lat.append(np.full(sizes[g], g, dtype=np.int64))
    X = np.vstack(xs)
    y = np.concatenate(ys)
    latent = np.concatenate(lat)
    if shuffle_declared:
        dom = rng.integers(0, K_declared, len(y)).astype(np.int64)
    else:
        dom = latent % K_declared
    return Dataset(X, y, dom, dom.copy(), latent)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass
class DomainSplit:
    """Disjoint per-domain index sets: train / meta-validation / held-out."""

    train: dict
    meta_val: dict
    held_out: dict

    @property
    def domains(self):
        return sorted(self.train)

    def train_indices_all(self) -> np.ndarray:
        return np.concatenate([self.train[k] for k in self.domains])


def split_domain(data, seed) -> DomainSplit:
    """Per domain: 20% held out, then 20% of the rest for meta-validation.

    The smaller part of each cut takes the floor, so 100 samples yield
    (64, 16, 20). Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    train, meta_val, held_out = {}, {}, {}
    for k in range(int(data.domain_id.max()) + 1):
        idx = np.flatnonzero(data.domain_id == k)
        if len(idx) < 10:
            raise ValueError(f"domain {k} has only {len(idx)} samples; need >= 10")
        perm = rng.permutation(idx)
        n_held = int(np.floor(0.2 * len(idx)))
        rest = len(idx) - n_held
        n_val = int(np.floor(0.2 * rest))
        held_out[k] = np.sort(perm[:n_held])
        meta_val[k] = np.sort(perm[n_held : n_held + n_val])
        train[k] = np.sort(perm[n_held + n_val :])
    return DomainSplit(train, meta_val, held_out)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    X: np.ndarray
    y: np.ndarray
    domain_id: np.ndarray
    group_id: np.ndarray
    origin: tuple = ("meta_train_pooled",)

    @property
    def n(self) -> int:
        return len(self.y)


class _EpochCursor:
    """Without-replacement draws from an index set; reshuffles on exhaustion."""

    def __init__(self, indices, rng):
        self._indices = np.asarray(indices)
        self._rng = rng
        self._order = rng.permutation(self._indices)
        self._pos = 0

    def take(self, count) -> np.ndarray:
        if count > len(self._indices):
            raise ValueError(f"batch of {count} exceeds pool of {len(self._indices)}")
        if self._pos + count > len(self._order):
            self._order = self._rng.permutation(self._indices)
            self._pos = 0
        out = self._order[self._pos : self._pos + count]
        self._pos += count
        return out


class PooledBatchSampler:
    """One equal-size sub-batch per training domain, concatenated in domain order."""

    def __init__(self, view: TrainView, split: DomainSplit, batch_per_domain: int, rng):
        if batch_per_domain < 1:
            raise ValueError("batch_per_domain must be positive")
        for k in split.domains:
            if len(split.train[k]) == 0:
                raise ValueError(f"empty train split for domain {k}")
            if len(split.train[k]) < batch_per_domain:
                raise ValueError(
                    f"domain {k} train split ({len(split.train[k])}) smaller than "
                    f"batch_per_domain ({batch_per_domain})"
                )
        self._view = view
        self._domains = split.domains
        self._batch = batch_per_domain
        self._cursors = {k: _EpochCursor(split.train[k], rng) for k in self._domains}

    def next_batch(self) -> Batch:
        idx = np.concatenate([self._cursors[k].take(self._batch) for k in self._domains])
        v = self._view
        return Batch(
            v.X[idx], v.y[idx], v.domain_id[idx], v.group_id[idx], ("meta_train_pooled",)
        )


class MetaValSampler:
    """One meta-validation mini-batch per domain per round."""

    def __init__(self, view: TrainView, split: DomainSplit, batch_per_domain: int, rng):
        self._view = view
        self._domains = split.domains
        self._batch = {
            k: min(batch_per_domain, len(split.meta_val[k])) for k in self._domains
        }
        for k in self._domains:
            if len(split.meta_val[k]) == 0:
                raise ValueError(f"empty meta-validation split for domain {k}")
        self._cursors = {k: _EpochCursor(split.meta_val[k], rng) for k in self._domains}

    def next_batches(self) -> list:
        out = []
        for k in self._domains:
            idx = self._cursors[k].take(self._batch[k])
            v = self._view
            out.append(
                Batch(v.X[idx], v.y[idx], v.domain_id[idx], v.group_id[idx], ("meta_validation", k))
            )
        return out


# ---------------------------------------------------------------------------
# Meta-validation augmentation
# ---------------------------------------------------------------------------

_TRANSFORMS = ("gaussian_jitter", "random_scale", "feature_dropout")


def validate_aug_spec(aug_spec):
    """Normalize to a tuple of (name, param) pairs, rejecting bad parameters."""
    out = []
    for entry in aug_spec:
        name, param = entry[0], entry[1]
        if name == "gaussian_jitter":
            param = float(param)
            if param < 0:
                raise ValueError("gaussian_jitter sigma must be >= 0")
        elif name == "random_scale":
            lo, hi = float(param[0]), float(param[1])
            if lo > hi:
                raise ValueError("random_scale range must satisfy lo <= hi")
            param = (lo, hi)
        elif name == "feature_dropout":
            param = float(param)
            if not 0.0 <= param < 1.0:
                raise ValueError("feature_dropout p must lie in [0, 1)")
        else:
            raise ValueError(f"unknown transform {name!r}; choose from {_TRANSFORMS}")
        out.append((name, param))
    return tuple(out)


def _apply_transform(name, param, X, rng):
    if name == "gaussian_jitter":
        return X + rng.normal(0.0, param, X.shape) if param > 0 else X + 0.0
    if name == "random_scale":
        lo, hi = param
        return X * rng.uniform(lo, hi, (X.shape[0], 1))
    if name == "feature_dropout":
        return X * (rng.random(X.shape) >= param)
    raise ValueError(f"unknown transform {name!r}")


def augment_meta_validation(batches, aug_spec, rng) -> list:
    """Append one transformed copy of every batch per transform.

    K source batches and A transforms give K*(1+A) batches; labels and
    batch sizes are untouched, and each new batch records its source
    domain and transform index in ``origin``.
    """
    spec = validate_aug_spec(aug_spec)
    out = list(batches)
    for a, (name, param) in enumerate(spec):
        for b in batches:
            source = b.origin[1] if len(b.origin) > 1 else -1
            out.append(
                Batch(
                    _apply_transform(name, param, b.X, rng),
                    b.y.copy(),
                    b.domain_id.copy(),
                    b.group_id.copy(),
                    ("augmented", source, a),
                )
            )
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_jsonl(data: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(data.n):
            row = {
                "x": data.X[i].tolist(),
                "y": int(data.y[i]),
                "domain_id": int(data.domain_id[i]),
                "group_id": int(data.group_id[i]),
                "latent_group": None if data.latent_group is None else int(data.latent_group[i]),
            }
            fh.write(json.dumps(row) + "\n")


def load_jsonl(path) -> Dataset:
    xs, ys, doms, groups, lats = [], [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            xs.append(row["x"])
            ys.append(row["y"])
            doms.append(row["domain_id"])
            groups.append(row["group_id"])
            lats.append(row["latent_group"])
    latent = None if any(v is None for v in lats) else np.asarray(lats, dtype=np.int64)
    return Dataset(np.asarray(xs), np.asarray(ys), np.asarray(doms), np.asarray(groups), latent)
