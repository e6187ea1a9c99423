"""Deterministic derivation of role-specific RNGs from one run seed."""

from __future__ import annotations

import numpy as np


def _tag_word(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return int.from_bytes(str(tag).encode(), "little")


def child_seed(seed: int, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed)] + [_tag_word(t) for t in tags])


def child_rng(seed: int, *tags) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, *tags))
