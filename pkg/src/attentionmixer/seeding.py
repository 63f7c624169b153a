"""Deterministic seed fan-out.

A master seed and a purpose label (e.g. ``"folds"``, ``"train/fold2"``) map to
a 63-bit stream seed: the first 8 bytes, big-endian, of
``sha256(f"{master}/{label}")`` with the top bit cleared.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, *labels) -> int:
    key = "/".join([str(int(master))] + [str(x) for x in labels])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def rng_for(master: int, *labels) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *labels))
