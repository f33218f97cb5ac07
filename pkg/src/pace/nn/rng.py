"""Deterministic, splittable random streams.

Every stochastic site in the stack draws from a counter-based Philox
stream keyed by ``(seed, domain, *key)`` through ``SeedSequence`` spawn
keys.  Streams are derived statelessly: the same key always yields the
same stream regardless of call order, so dropout masks, parameter
initialisation, and data shuffles are each replayable in isolation.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep independent consumers out of each other's streams.
DOMAIN_INIT = 0
DOMAIN_DROPOUT = 1
DOMAIN_SHUFFLE = 2
DOMAIN_EVAL = 3


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream addressed by ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def init_rng(seed: int, unit: int) -> np.random.Generator:
    """Stream for initialising parameter tensor number ``unit``."""
    return derive_rng(seed, DOMAIN_INIT, unit)


def dropout_rng(seed: int, layer_id: int, step: int) -> np.random.Generator:
    """Stream for one dropout site at one optimisation step."""
    return derive_rng(seed, DOMAIN_DROPOUT, layer_id, step)


def shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    """Stream for shuffling the training windows of one epoch."""
    return derive_rng(seed, DOMAIN_SHUFFLE, epoch)
