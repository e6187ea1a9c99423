"""Multi-domain ensembles trained by relevance-scored meta-optimization.

Each iteration: (i) every member takes a differentiable inner step on the
pooled batch, (ii) each meta-validation batch (one per domain, optionally
extended with feature-space augmentations) is scored against each member
and assigned to the highest-scoring one, (iii) every member takes an
outer step on L + eta * G where G is the loss of its inner-updated
parameters on its assigned batches, backpropagated through the inner step.

The exact outer gradient is

    dL/dtheta + eta * (I - alpha * H_L) * grad_{theta'} G

with the Hessian-vector product computed by the engine; first-order mode
drops the H_L term. A member with no assigned batches takes a plain step
on L. Relevance scoring strategies: random one-hot, all-to-all, one minus
mean validation loss, and the dot product between the member's pooled-
batch gradient and its validation-batch gradient (both at the pre-update
parameters).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .datagen import Batch, DomainSplit, MetaValSampler, PooledBatchSampler, TrainView, augment_meta_validation, validate_aug_spec
from .optim import make_optimizer
from .seeding import child_rng, child_seed
from .selection import CheckpointRecord, heldout_domain_accuracy

MRS_STRATEGIES = ("random", "all_to_all", "loss_based", "gradient_matching")


@dataclass
class DreameConfig:
    M: int = 3
    alpha: float = 1e-3  # inner step size (plain gradient step, kept differentiable)
    lambda_outer: float = 1e-3  # outer optimizer rate
    eta: float = 1.0  # meta-loss weight
    mrs_strategy: str = "gradient_matching"
    second_order: bool = True
    hvp_mode: str = "exact"  # "exact" | "fd"
    n_iter: int = 600
    batch_per_domain: int = 32
    aug_spec: tuple = (("gaussian_jitter", 0.1),)
    meta_loss_normalize: bool = True  # False keeps the raw sum over assigned batches
    predict_averaging: str = "probs"  # "probs" | "logits"
    optimizer: str = "adam"
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("ensemble size must be >= 1")
        if self.alpha <= 0 or self.lambda_outer <= 0:
            raise ValueError("alpha and lambda_outer must be positive")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.mrs_strategy not in MRS_STRATEGIES:
            raise ValueError(f"mrs_strategy must be one of {MRS_STRATEGIES}")
        self.aug_spec = validate_aug_spec(self.aug_spec)


@dataclass
class Ensemble:
    members: list  # list[MLPParams] sharing one spec

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def spec(self) -> models.MLPSpec:
        return self.members[0].spec

    def copy(self) -> "Ensemble":
        return Ensemble([m.copy() for m in self.members])


@dataclass
class MRSMatrix:
    beta: np.ndarray  # (K_bar, M) relevance scores
    strategy: str

    def __post_init__(self):
        self.beta = np.atleast_2d(np.asarray(self.beta, dtype=np.float64))
        if not np.isfinite(self.beta).all():
            raise ValueError("non-finite relevance score")


@dataclass
class AssignmentSets:
    gamma: list  # list of index lists, one per member


def init_ensemble(spec: models.MLPSpec, M: int, seed: int) -> Ensemble:
    return Ensemble([models.init_mlp(spec, child_seed(seed, "member", m)) for m in range(M)])


def inner_update(member: models.MLPParams, pooled: Batch, alpha: float):
    """One plain gradient step on the mean pooled loss.

    Returns (theta_prime arrays, the loss expression, its gradient); the
    member itself is untouched.
    """
    if pooled.n == 0:
        raise ValueError("empty pooled batch")
    expr = models.loss_expression(member.spec, pooled.X, pooled.y, "mean")
    arrays = member.arrays()
    g = ad.gradient(expr, arrays)
    theta_prime = [p - alpha * gi for p, gi in zip(arrays, g.segments)]
    return theta_prime, expr, g


def compute_mrs(
    ensemble: Ensemble,
    L_exprs,
    validation_batches,
    strategy: str,
    rng,
    L_grads=None,
) -> MRSMatrix:
    """Score every (validation batch, member) pair.

    gradient_matching: dot product of the member's pooled-batch gradient
    and its mean-loss gradient on the batch, both at the current
    parameters. loss_based: one minus the member's mean loss on the
    batch. L_grads, when provided, skips recomputing the pooled gradients.
    """
    if strategy not in MRS_STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    K_bar, M = len(validation_batches), ensemble.M
    for v in validation_batches:
        if v.n == 0:
            raise ValueError("empty validation batch")
    beta = np.zeros((K_bar, M))
    if strategy == "random":
        cols = rng.integers(0, M, K_bar)
        beta[np.arange(K_bar), cols] = 1.0
        return MRSMatrix(beta, strategy)
    if strategy == "all_to_all":
        return MRSMatrix(np.ones((K_bar, M)), strategy)
    spec = ensemble.spec
    if strategy == "loss_based":
        for m, member in enumerate(ensemble.members):
            arrays = member.arrays()
            for k, v in enumerate(validation_batches):
                beta[k, m] = 1.0 - models.loss_expression(spec, v.X, v.y, "mean").value(arrays)
        return MRSMatrix(beta, strategy)
    # gradient_matching
    if L_grads is None:
        L_grads = [ad.gradient(expr, member.arrays()) for expr, member in zip(L_exprs, ensemble.members)]
    for m, member in enumerate(ensemble.members):
        arrays = member.arrays()
        for k, v in enumerate(validation_batches):
            g_val = ad.gradient(models.loss_expression(spec, v.X, v.y, "mean"), arrays)
            beta[k, m] = ad.grad_dot(L_grads[m], g_val)
    return MRSMatrix(beta, strategy)


def assign_batches(mrs: MRSMatrix) -> AssignmentSets:
    """Row-wise argmax assignment (ties to the lowest member index);
    all_to_all hands every batch to every member."""
    K_bar, M = mrs.beta.shape
    if mrs.strategy == "all_to_all":
        return AssignmentSets([list(range(K_bar)) for _ in range(M)])
    winners = np.argmax(mrs.beta, axis=1)
    return AssignmentSets([[int(k) for k in np.flatnonzero(winners == m)] for m in range(M)])


def _concat_batches(batches):
    X = np.vstack([b.X for b in batches])
    y = np.concatenate([b.y for b in batches])
    return X, y


def meta_gradient(
    member: models.MLPParams,
    theta_prime,
    L_expr: ad.ScalarExpression,
    L_grad: ad.GradientVector,
    assigned_batches,
    cfg: DreameConfig,
) -> ad.GradientVector:
    """Gradient of L + eta * G(theta') with respect to the member parameters.

    With no assigned batches (or eta == 0) this is exactly the pooled-loss
    gradient, so the member falls back to a plain step.
    """
    if not assigned_batches or cfg.eta == 0.0:
        return L_grad
    X, y = _concat_batches(assigned_batches)
    reduction = "mean" if cfg.meta_loss_normalize else "sum"
    G_expr = models.loss_expression(member.spec, X, y, reduction)
    g_val = ad.gradient(G_expr, theta_prime)
    if cfg.second_order:
        hv = ad.hvp(L_expr, member.arrays(), g_val, cfg.hvp_mode)
        meta = g_val - hv.scaled(cfg.alpha)
    else:
        meta = g_val
    return L_grad + meta.scaled(cfg.eta)


def meta_objective_and_update(
    member: models.MLPParams,
    theta_prime,
    L_expr,
    L_grad,
    assigned_batches,
    cfg: DreameConfig,
    optimizer,
) -> models.MLPParams:
    g = meta_gradient(member, theta_prime, L_expr, L_grad, assigned_batches, cfg)
    optimizer.step(member.arrays(), g)
    return member


def ensemble_predict(ensemble: Ensemble, X, averaging: str = "probs"):
    """Unweighted average of member predictions; returns (probs, labels)."""
    if averaging == "probs":
        stacked = np.stack(
            [models.softmax(models.forward_logits(m, X)) for m in ensemble.members]
        )
        probs = stacked.mean(axis=0)
    elif averaging == "logits":
        logits = np.stack([models.forward_logits(m, X) for m in ensemble.members]).mean(axis=0)
        probs = models.softmax(logits)
    else:
        raise ValueError(f"unknown averaging {averaging!r}")
    return probs, np.argmax(probs, axis=1)


@dataclass
class DreameResult:
    ensemble: Ensemble
    checkpoints: list
    record: dict = field(default_factory=dict)


def train_dreame(view: TrainView, split: DomainSplit, cfg: DreameConfig, seed: int, spec=None) -> DreameResult:
    from .dro import default_spec  # shared default architecture

    spec = spec or default_spec(view)
    ensemble = init_ensemble(spec, cfg.M, seed)
    optimizers = [make_optimizer(cfg.optimizer, cfg.lambda_outer) for _ in range(cfg.M)]
    pooled_sampler = PooledBatchSampler(view, split, cfg.batch_per_domain, child_rng(seed, "batches"))
    val_sampler = MetaValSampler(view, split, cfg.batch_per_domain, child_rng(seed, "metaval"))
    aug_rng = child_rng(seed, "augment")
    mrs_rng = child_rng(seed, "mrs")
    marks = set(range(cfg.checkpoint_every, cfg.n_iter + 1, cfg.checkpoint_every)) | {cfg.n_iter}

    checkpoints, assignment_history = [], []
    for step in range(1, cfg.n_iter + 1):
        pooled = pooled_sampler.next_batch()
        inner = [inner_update(m, pooled, cfg.alpha) for m in ensemble.members]
        vbatches = augment_meta_validation(val_sampler.next_batches(), cfg.aug_spec, aug_rng)
        mrs = compute_mrs(
            ensemble,
            [expr for _, expr, _ in inner],
            vbatches,
            cfg.mrs_strategy,
            mrs_rng,
            L_grads=[g for _, _, g in inner],
        )
        assignment = assign_batches(mrs)
        if cfg.mrs_strategy == "all_to_all":
            assignment_history.append([-1] * len(vbatches))
        else:
            winners = np.argmax(mrs.beta, axis=1)
            assignment_history.append([int(w) for w in winners])
        for m, member in enumerate(ensemble.members):
            theta_prime, L_expr, L_grad = inner[m]
            assigned = [vbatches[k] for k in assignment.gamma[m]]
            meta_objective_and_update(member, theta_prime, L_expr, L_grad, assigned, cfg, optimizers[m])

        if step in marks:
            member_acc = np.stack(
                [
                    heldout_domain_accuracy(view, split, lambda X, m=m: models.predict_labels(m, X))
                    for m in ensemble.members
                ]
            )
            ens_acc = heldout_domain_accuracy(
                view, split, lambda X: ensemble_predict(ensemble, X, cfg.predict_averaging)[1]
            )
            checkpoints.append(
                CheckpointRecord(len(checkpoints), step, member_acc, ens_acc, ensemble.copy())
            )

    record = {
        "method": "dreame",
        "seed": seed,
        "mrs_strategy": cfg.mrs_strategy,
        "second_order": cfg.second_order,
        "hvp_mode": cfg.hvp_mode if cfg.second_order else "first_order",
        "kernel_backend": ad.kernel_backend_name(),
        "checkpoint_iterations": [c.iteration for c in checkpoints],
        "assignment_history": assignment_history,
        "num_meta_batches": len(split.domains) * (1 + len(cfg.aug_spec)),
    }
    return DreameResult(ensemble, checkpoints, record)
