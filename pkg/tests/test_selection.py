import numpy as np
import pytest

from mdgkit.selection import CheckpointRecord, select_overall_avg, select_overall_ens


def rec(i, member, ens):
    return CheckpointRecord(i, 50 * (i + 1), np.asarray(member), np.asarray(ens), snapshot=None)


def test_single_checkpoint_selected():
    history = [rec(0, [[0.5, 0.6]], [0.55, 0.6])]
    assert select_overall_avg(history) == 0
    assert select_overall_ens(history) == 0


def test_avg_picks_higher_member_mean():
    history = [
        rec(0, [[0.7, 0.7], [0.7, 0.7]], [0.71, 0.71]),
        rec(1, [[0.72, 0.72], [0.72, 0.72]], [0.70, 0.70]),
    ]
    assert select_overall_avg(history) == 1


def test_avg_invariant_to_domain_permutation():
    h1 = [rec(0, [[0.5, 0.9]], [0.7, 0.7]), rec(1, [[0.8, 0.7]], [0.7, 0.7])]
    h2 = [rec(0, [[0.9, 0.5]], [0.7, 0.7]), rec(1, [[0.7, 0.8]], [0.7, 0.7])]
    assert select_overall_avg(h1) == select_overall_avg(h2)


def test_ens_monotone_history_picks_last():
    history = [rec(i, [[0.5, 0.5]], [0.5 + 0.05 * i, 0.5 + 0.05 * i]) for i in range(5)]
    assert select_overall_ens(history) == 4


def test_ens_mean_comparison():
    history = [rec(0, [[0.9, 0.9]], [0.6, 0.8]), rec(1, [[0.5, 0.5]], [0.71, 0.71])]
    assert select_overall_ens(history) == 1


def test_avg_and_ens_can_disagree():
    history = [
        rec(0, [[0.90, 0.90]], [0.60, 0.60]),
        rec(1, [[0.60, 0.60]], [0.90, 0.90]),
    ]
    assert select_overall_avg(history) == 0
    assert select_overall_ens(history) == 1


def test_ties_break_to_earliest():
    history = [rec(0, [[0.8, 0.8]], [0.8, 0.8]), rec(1, [[0.8, 0.8]], [0.8, 0.8])]
    assert select_overall_avg(history) == 0
    assert select_overall_ens(history) == 0


def test_rescaling_invariance():
    member = np.random.default_rng(0).random((3, 2, 4))
    h1 = [rec(i, member[i], member[i].mean(axis=0)) for i in range(3)]
    h2 = [rec(i, member[i] * 0.5, member[i].mean(axis=0) * 0.5) for i in range(3)]
    assert select_overall_avg(h1) == select_overall_avg(h2)
    assert select_overall_ens(h1) == select_overall_ens(h2)


def test_record_validation():
    with pytest.raises(ValueError):
        CheckpointRecord(0, 1, np.array([[0.5, 1.2]]), np.array([0.5, 0.5]), None)
    with pytest.raises(ValueError):
        CheckpointRecord(0, 1, np.array([[0.5, 0.5]]), np.array([0.5]), None)
    with pytest.raises(ValueError):
        select_overall_avg([])
