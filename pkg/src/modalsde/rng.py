"""Deterministic seed derivation.

Every stochastic routine in the package takes an integer seed and builds its
generator through `child_rng`, so a run is a pure function of its config seed.
Labels keep independent streams (data, init, training noise, sampling, ...)
from colliding without manual seed bookkeeping.
"""

from __future__ import annotations

import zlib

import numpy as np


def child_seed(seed: int, label: str) -> int:
    """Stable derived seed for a named substream."""
    return (int(seed) & 0xFFFFFFFF) ^ zlib.crc32(label.encode("utf-8"))


def child_rng(seed: int, label: str = "") -> np.random.Generator:
    """Generator for a named substream of `seed`."""
    if label:
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))])))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & 0xFFFFFFFF)))
