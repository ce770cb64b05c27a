"""Deterministic per-purpose random streams.

Every consumer derives its own generator from (seed, string tags), so
toggling one pipeline stage or ablation never perturbs another stage's
draws.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(seed: int, *tags) -> np.random.Generator:
    digest = hashlib.sha256("|".join(str(t) for t in tags).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words]))
