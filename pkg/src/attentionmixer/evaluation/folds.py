from __future__ import annotations

from typing import Iterable

import numpy as np


def make_folds(patient_ids: Iterable[str], k: int, seed: int) -> dict[str, int]:
    """Patient-exclusive fold assignment: seeded shuffle of unique ids, then round-robin."""
    unique = sorted(set(patient_ids))
    if k < 2:
        raise ValueError("need at least 2 folds")
    if k > len(unique):
        raise ValueError(f"{k} folds requested but only {len(unique)} distinct patients")
    order = np.random.default_rng(seed).permutation(len(unique))
    return {unique[j]: i % k for i, j in enumerate(order)}


def fold_indices(sample_patients, assignment: dict[str, int], fold: int) -> tuple[np.ndarray, np.ndarray]:
    """(train, validation) sample indices for one fold."""
    f = np.array([assignment[p] for p in sample_patients])
    return np.flatnonzero(f != fold), np.flatnonzero(f == fold)
