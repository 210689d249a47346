"""Seeded RNG derivation.

Every stochastic subsystem (data order, weight init, samplers, ...) draws
from its own named stream so that disabling one subsystem never shifts the
draws of another. Streams are derived from the run seed plus string tags.
"""

import zlib

import numpy as np


def derive_rng(seed: int, *tags: str) -> np.random.Generator:
    """Return a generator unique to (seed, tags), stable across runs."""
    keys = tuple(zlib.crc32(t.encode("utf-8")) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=keys))
