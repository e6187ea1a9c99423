"""ERM baseline, GroupDRO, and GroupDRO++ (DRO alternated with group
re-labeling by k-means over the feature trunk).

Weighted objective, per the re-labeling algorithm:

    L = sum_k q_k * sum_{i: g_i = k} loss_i          (group_sum reduction)
    R = sum_i q_{g_i}^gamma * loss_i
    objective = L + lambda_reg * R

``group_mean`` reduction replaces the inner sums with means, which with a
zero regularizer recovers plain GroupDRO. Group weights follow the
exponentiated update q_k <- q_k * exp(eta_q * mean-loss_k), renormalized
to the simplex, computed from the current mini-batch before each
parameter step (groups absent from the batch contribute loss 0).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import models
from .clustering import kmeans_cluster
from .datagen import DomainSplit, PooledBatchSampler, TrainView
from .metrics import adjusted_rand_index
from .optim import make_optimizer
from .seeding import child_rng, child_seed
from .selection import CheckpointRecord, heldout_domain_accuracy


@dataclass
class GroupWeights:
    """Adaptive simplex weights over groups."""

    q: np.ndarray
    eta_q: float

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)

    @classmethod
    def uniform(cls, n_groups: int, eta_q: float) -> "GroupWeights":
        return cls(np.ones(n_groups) / n_groups, eta_q)


def update_group_weights(gw: GroupWeights, per_group_mean_loss) -> GroupWeights:
    """q_k proportional to q_k * exp(eta_q * loss_k), renormalized."""
    losses = np.asarray(per_group_mean_loss, dtype=np.float64)
    if losses.shape != gw.q.shape:
        raise ValueError(f"expected {gw.q.shape[0]} group losses, got {losses.shape}")
    if not np.isfinite(losses).all():
        raise ValueError("non-finite group loss")
    if (losses < 0).any():
        raise ValueError("group losses must be >= 0")
    # log-space form of q_k * exp(eta_q * loss_k); immune to exp overflow
    logits = np.log(gw.q) + gw.eta_q * losses
    raw = np.exp(logits - logits.max())
    q = raw / raw.sum()
    q = np.maximum(q, np.finfo(np.float64).tiny)  # simplex interior, even after long concentration
    return GroupWeights(q / q.sum(), gw.eta_q)


def group_mean_losses(per_sample_loss, group_ids, n_groups: int) -> np.ndarray:
    """Mean loss per group over a batch; groups not present contribute 0."""
    counts = np.bincount(group_ids, minlength=n_groups).astype(np.float64)
    sums = np.bincount(group_ids, weights=per_sample_loss, minlength=n_groups)
    return np.divide(sums, counts, out=np.zeros(n_groups), where=counts > 0)


def dro_objective_nodes(
    lvec: ad.Node,
    group_ids,
    q,
    gamma: float,
    lambda_reg: float,
    reduction: str = "group_sum",
) -> dict:
    """Weighted-objective graph on top of a per-sample loss vector node.

    Returns nodes {"objective", "L", "R"}; R is None when lambda_reg == 0
    (and is then kept out of the objective graph entirely, so the
    lambda_reg = 0 path is arithmetically identical to plain L).
    """
    group_ids = np.asarray(group_ids)
    q = np.asarray(q, dtype=np.float64)
    M = len(q)
    if group_ids.min() < 0 or group_ids.max() >= M:
        raise ValueError("group index out of range")
    if reduction not in ("group_sum", "group_mean"):
        raise ValueError(f"unknown reduction {reduction!r}")
    L = None
    for k in range(M):
        mask = group_ids == k
        if not mask.any():
            continue
        term = ad.sum_all(ad.mul(lvec, ad.constant(mask.astype(np.float64))))
        weight = q[k] if reduction == "group_sum" else q[k] / mask.sum()
        contrib = ad.scale(term, weight)
        L = contrib if L is None else ad.add(L, contrib)
    if lambda_reg == 0.0:
        return {"objective": L, "L": L, "R": None}
    sample_weights = q[group_ids] ** gamma
    R = ad.sum_all(ad.mul(lvec, ad.constant(sample_weights)))
    return {"objective": ad.add(L, ad.scale(R, lambda_reg)), "L": L, "R": R}


def groupdro_pp_objective(
    spec: models.MLPSpec,
    batch,
    gw: GroupWeights,
    gamma: float,
    lambda_reg: float,
    reduction: str = "group_sum",
) -> ad.ScalarExpression:
    """The weighted objective on a fixed batch as a function of the parameters."""
    X = np.ascontiguousarray(batch.X, dtype=np.float64)
    y = np.ascontiguousarray(batch.y, dtype=np.int64)
    group_ids = np.asarray(batch.group_id)
    q = gw.q.copy()

    def build(leaves):
        lvec = models.per_sample_nll(models.logits_node(spec, leaves, ad.constant(X)), y)
        return dro_objective_nodes(lvec, group_ids, q, gamma, lambda_reg, reduction)["objective"]

    return ad.ScalarExpression(build)


def relabel_groups(view: TrainView, train_indices, params: models.MLPParams, M: int, seed) -> np.ndarray:
    """Replace group ids of the pooled train samples with k-means labels over
    the feature trunk. Other indices (meta-validation, held-out) untouched.

    Columns of the feature matrix are standardized before clustering:
    training grows task-relevant directions by orders of magnitude, and
    without whitening they drown the separations the clustering is after.
    """
    train_indices = np.asarray(train_indices)
    Z = models.forward_features(params, view.X[train_indices])
    sd = Z.std(axis=0)
    scale = np.where(sd > 1e-12, sd, 1.0)
    labels = kmeans_cluster((Z - Z.mean(axis=0)) / scale, M, seed)
    view.group_id[train_indices] = labels
    return labels


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------


@dataclass
class ERMConfig:
    lr: float = 1e-3
    optimizer: str = "adam"
    n_iter: int = 600
    batch_per_domain: int = 32
    reduction: str = "mean"  # "mean" | "sum"
    checkpoint_every: int = 50


@dataclass
class DROConfig:
    lambda_reg: float = 0.1
    gamma: float = 0.3
    eta_q: float = 0.2
    T: int = 50
    n_iter: int = 600
    M_groups: int = 4
    lr: float = 1e-3
    optimizer: str = "adam"
    mode: str = "groupdro_pp"  # "groupdro_pp" | "vanilla"
    loss_reduction: str = ""  # "" selects the mode default
    reset_q_on_relabel: bool = False
    batch_per_domain: int = 32
    checkpoint_every: int = 50

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.T < 1 or self.n_iter < 1 or self.M_groups < 1:
            raise ValueError("T, n_iter and M_groups must be positive")
        if self.mode not in ("groupdro_pp", "vanilla"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def resolved_reduction(self) -> str:
        if self.loss_reduction:
            return self.loss_reduction
        return "group_sum" if self.mode == "groupdro_pp" else "group_mean"


@dataclass
class TrainResult:
    params: object  # MLPParams or list of members
    checkpoints: list
    record: dict = field(default_factory=dict)


def default_spec(view: TrainView, hidden_dims=(32, 16), activation="relu") -> models.MLPSpec:
    return models.MLPSpec(view.X.shape[1], tuple(hidden_dims), view.num_classes, activation)


def erm_step(params: models.MLPParams, batch, optimizer, reduction: str = "mean") -> models.MLPParams:
    """One optimizer step on the batch cross-entropy, ignoring group ids."""
    if batch.n == 0:
        raise ValueError("empty batch")
    arrays = params.arrays()
    leaves = [ad.leaf(a) for a in arrays]
    loss = models.cross_entropy(
        models.logits_node(params.spec, leaves, ad.constant(batch.X)), batch.y, reduction
    )
    grads = _grads_from(loss, leaves)
    optimizer.step(arrays, grads)
    return params


def _grads_from(root: ad.Node, leaves) -> ad.GradientVector:
    adjs = ad.grad_nodes(root, leaves)
    return ad.GradientVector(
        tuple(
            a.value.copy() if a is not None else np.zeros_like(l.value)
            for a, l in zip(adjs, leaves)
        )
    )


def _checkpoint_steps(n_iter: int, every: int):
    steps = set(range(every, n_iter + 1, every))
    steps.add(n_iter)
    return steps


def train_erm(view: TrainView, split: DomainSplit, cfg: ERMConfig, seed: int, spec=None) -> TrainResult:
    spec = spec or default_spec(view)
    params = models.init_mlp(spec, child_seed(seed, "init"))
    optimizer = make_optimizer(cfg.optimizer, cfg.lr)
    sampler = PooledBatchSampler(view, split, cfg.batch_per_domain, child_rng(seed, "batches"))
    marks = _checkpoint_steps(cfg.n_iter, cfg.checkpoint_every)
    checkpoints = []
    for step in range(1, cfg.n_iter + 1):
        erm_step(params, sampler.next_batch(), optimizer, cfg.reduction)
        if step in marks:
            accs = heldout_domain_accuracy(view, split, lambda X: models.predict_labels(params, X))
            checkpoints.append(
                CheckpointRecord(len(checkpoints), step, accs[None, :], accs, params.copy())
            )
    record = {
        "method": "erm",
        "seed": seed,
        "loss_reduction": cfg.reduction,
        "kernel_backend": ad.kernel_backend_name(),
        "checkpoint_iterations": [c.iteration for c in checkpoints],
    }
    return TrainResult(params, checkpoints, record)


def train_groupdro(view: TrainView, split: DomainSplit, cfg: DROConfig, seed: int, spec=None) -> TrainResult:
    """GroupDRO on declared groups, or GroupDRO++ with periodic re-labeling.

    Every step: per-group mean losses on the current batch update q, then
    one optimizer step on the weighted objective built with the updated
    weights. In groupdro_pp mode the pooled train samples are re-clustered
    every T steps (and once up front if M_groups differs from the declared
    domain count, so group ids are always in range).
    """
    spec = spec or default_spec(view)
    view.group_id[:] = view.domain_id  # trainers assume declared groups at entry
    params = models.init_mlp(spec, child_seed(seed, "init"))
    optimizer = make_optimizer(cfg.optimizer, cfg.lr)
    sampler = PooledBatchSampler(view, split, cfg.batch_per_domain, child_rng(seed, "batches"))
    reduction = cfg.resolved_reduction
    M = cfg.M_groups
    relabeling = cfg.mode == "groupdro_pp"
    lambda_reg = cfg.lambda_reg if cfg.mode == "groupdro_pp" else 0.0
    train_idx = split.train_indices_all()
    declared = view.domain_id[train_idx].copy()

    if cfg.mode == "vanilla" and M != len(split.domains):
        raise ValueError("vanilla mode requires M_groups == number of declared domains")
    relabel_history = []
    phase = 0
    if relabeling and M != len(split.domains):
        labels = relabel_groups(view, train_idx, params, M, child_seed(seed, "relabel", phase))
        relabel_history.append({"iteration": 0, "ari_vs_declared": adjusted_rand_index(labels, declared)})
        phase += 1

    gw = GroupWeights.uniform(M, cfg.eta_q)
    marks = _checkpoint_steps(cfg.n_iter, cfg.checkpoint_every)
    checkpoints, q_history = [], []
    for step in range(1, cfg.n_iter + 1):
        batch = sampler.next_batch()
        arrays = params.arrays()
        leaves = [ad.leaf(a) for a in arrays]
        lvec = models.per_sample_nll(
            models.logits_node(spec, leaves, ad.constant(batch.X)), batch.y
        )
        gw = update_group_weights(gw, group_mean_losses(lvec.value, batch.group_id, M))
        nodes = dro_objective_nodes(lvec, batch.group_id, gw.q, cfg.gamma, lambda_reg, reduction)
        optimizer.step(arrays, _grads_from(nodes["objective"], leaves))

        if step in marks:
            accs = heldout_domain_accuracy(view, split, lambda X: models.predict_labels(params, X))
            checkpoints.append(
                CheckpointRecord(len(checkpoints), step, accs[None, :], accs, params.copy())
            )
            q_history.append({"iteration": step, "q": gw.q.tolist()})
        if relabeling and step % cfg.T == 0 and step < cfg.n_iter:
            labels = relabel_groups(view, train_idx, params, M, child_seed(seed, "relabel", phase))
            relabel_history.append(
                {"iteration": step, "ari_vs_declared": adjusted_rand_index(labels, declared)}
            )
            phase += 1
            if cfg.reset_q_on_relabel:
                gw = GroupWeights.uniform(M, cfg.eta_q)

    record = {
        "method": cfg.mode,
        "seed": seed,
        "loss_reduction": reduction,
        "kernel_backend": ad.kernel_backend_name(),
        "checkpoint_iterations": [c.iteration for c in checkpoints],
        "q_history": q_history,
        "relabel_history": relabel_history,
    }
    return TrainResult(params, checkpoints, record)


def train_groupdro_pp(view, split, cfg: DROConfig, seed: int, spec=None) -> TrainResult:
    if cfg.mode != "groupdro_pp":
        cfg = replace(cfg, mode="groupdro_pp")
    return train_groupdro(view, split, cfg, seed, spec)
