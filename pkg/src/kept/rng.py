"""Seeded random streams.

All randomness in the project comes from numpy's Philox counter-based
generator. A purpose label (``"init"``, ``"data-order"``, ...) is hashed with
CRC-32 and mixed with the master seed, so streams for different purposes are
independent and reproducible from the single run seed.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, label: str, *extra: int) -> np.random.Generator:
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8")), *(int(e) & 0xFFFFFFFF for e in extra)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0, dtype=np.float32) -> np.ndarray:
    """Normal(0, std^2) draws, redrawn until inside ``±bound*std``."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)
