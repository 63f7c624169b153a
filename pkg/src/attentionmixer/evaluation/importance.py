"""Permutation importance of metadata columns, measured as the drop in validation AUC."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..autodiff import no_grad
from ..model.network import AttentionMixer, Batch
from .metrics import auc

Permuter = Callable[[np.random.Generator, int], np.ndarray]


def random_permutation(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.permutation(n)


def identity_permutation(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.arange(n)


def column_importance(
    model: AttentionMixer,
    val: Batch,
    seed: int,
    repeats: int = 5,
    permuter: Permuter = random_permutation,
) -> np.ndarray:
    """Mean AUC drop per metadata column over ``repeats`` seeded permutations.

    Each column is shuffled across the validation records that have metadata;
    fully missing records keep their ``e_m`` input and stay out of the pool.
    """
    d_m = val.meta.shape[1]
    if not model.cfg.uses_meta:
        return np.zeros(d_m)
    with no_grad():
        f_hct = model.hct_token(val.tokens) if model.cfg.uses_hct else None

        def score(meta: np.ndarray) -> float:
            probs = model.fuse(f_hct, model.meta_token(meta, val.missing)).data
            return auc(probs.astype(np.float64), val.labels)

        baseline = score(val.meta)
        pool = np.flatnonzero(~val.missing)
        rng = np.random.default_rng(seed)
        drops = np.zeros(d_m)
        for j in range(d_m):
            total = 0.0
            for _ in range(repeats):
                perm = permuter(rng, pool.size)
                meta = val.meta.copy()
                meta[pool, j] = val.meta[pool[perm], j]
                total += baseline - score(meta)
            drops[j] = total / repeats
    return drops


@dataclass
class ImportanceReport:
    features: list[str]
    per_fold: np.ndarray  # (k, d_m)

    @property
    def mean(self) -> np.ndarray:
        return self.per_fold.mean(axis=0)

    def ranking(self) -> list[str]:
        order = np.argsort(-self.mean, kind="stable")
        return [self.features[i] for i in order]

    def top(self, n: int = 10) -> list[tuple[str, float]]:
        order = np.argsort(-self.mean, kind="stable")[:n]
        return [(self.features[i], float(self.mean[i])) for i in order]

    def rows(self):
        order = np.argsort(-self.mean, kind="stable")
        for rank, i in enumerate(order, start=1):
            yield [self.features[i], rank, float(self.mean[i])] + [float(x) for x in self.per_fold[:, i]]
