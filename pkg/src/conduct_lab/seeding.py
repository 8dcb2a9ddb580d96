"""Splittable seeding.

Every random stream is addressed by a master seed plus a tuple of integer keys,
for example ``(seed, 3)`` for the fourth environment of an ensemble or
``(seed, 3, 1)`` for the walk paths run on it.  The pair is fed to
:class:`numpy.random.SeedSequence` as ``entropy`` and ``spawn_key``, so streams
for distinct key tuples are independent and each one is reproducible on its own,
whatever order or thread it runs in.
"""
from __future__ import annotations

import numpy as np


def seed_sequence(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys))


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Generator for the stream addressed by ``(seed, *keys)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *keys)))


def derive_seed(seed: int, *keys: int) -> int:
    """A 63-bit integer seed for the stream ``(seed, *keys)``."""
    return int(seed_sequence(seed, *keys).generate_state(2, np.uint64)[0] >> np.uint64(1))
