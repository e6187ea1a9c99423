"""Checkpoint bookkeeping and the two checkpoint-selection rules.

Selection only ever sees held-out accuracies from the training domains;
test-domain data never reaches this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import accuracy


@dataclass
class CheckpointRecord:
    index: int
    iteration: int
    member_domain_acc: np.ndarray  # (M, K) per-member per-domain accuracy
    ensemble_domain_acc: np.ndarray  # (K,) ensemble (or single-model) accuracy
    snapshot: object  # parameter copy, opaque to selection

    def __post_init__(self):
        self.member_domain_acc = np.atleast_2d(np.asarray(self.member_domain_acc, dtype=np.float64))
        self.ensemble_domain_acc = np.asarray(self.ensemble_domain_acc, dtype=np.float64)
        if self.member_domain_acc.shape[1] != self.ensemble_domain_acc.shape[0]:
            raise ValueError("member and ensemble records disagree on domain count")
        for a in (self.member_domain_acc, self.ensemble_domain_acc):
            if a.min() < 0.0 or a.max() > 1.0:
                raise ValueError("accuracies must lie in [0, 1]")


def select_overall_avg(history) -> int:
    """Checkpoint whose members average highest across domains (ties: earliest)."""
    if not history:
        raise ValueError("empty checkpoint history")
    means = [rec.member_domain_acc.mean() for rec in history]
    return int(np.argmax(means))


def select_overall_ens(history) -> int:
    """Checkpoint whose ensemble averages highest across domains (ties: earliest)."""
    if not history:
        raise ValueError("empty checkpoint history")
    means = [rec.ensemble_domain_acc.mean() for rec in history]
    return int(np.argmax(means))


SELECTORS = {"overall_avg": select_overall_avg, "overall_ens": select_overall_ens}


def heldout_domain_accuracy(view, split, predict_fn) -> np.ndarray:
    """Accuracy of predict_fn on each domain's held-out indices, in domain order."""
    out = []
    for k in split.domains:
        idx = split.held_out[k]
        out.append(accuracy(predict_fn, view.X[idx], view.y[idx]))
    return np.asarray(out)
