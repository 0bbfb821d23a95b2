"""Seeded randomness shared by every module.

All draws go through numpy's PCG64 bit generator, whose stream is identical on
every platform for a given seed. Sub-streams for independent consumers
(perturbation, split, initialization, bootstrap, ...) are derived from the run
seed and a short tag so that adding a consumer never shifts another's draws.
"""
from __future__ import annotations

import zlib

import numpy as np


def make_rng(seed: int, tag: str = "") -> np.random.Generator:
    """Return a PCG64 generator keyed on ``(seed, tag)``."""
    key = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    if tag:
        key.append(zlib.crc32(tag.encode()))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    """Durstenfeld's in-place Fisher-Yates shuffle of ``range(n)``.

    For ``i = n-1 .. 1`` swap position ``i`` with a uniform ``j`` in ``[0, i]``.
    Written out explicitly so the permutation depends only on the bit stream.
    """
    perm = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm
