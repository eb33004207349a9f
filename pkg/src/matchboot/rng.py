"""Deterministic random streams keyed by integer tuples.

A stream is identified by a root seed plus a key path, e.g. ``(seed, rep, b)``.
Streams with different keys are statistically independent and do not depend
on the order in which they are requested, so serial and parallel execution
produce identical draws.
"""

import numpy as np


def seed_sequence(seed, *key):
    return np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))


def stream(seed, *key):
    """Return a fresh ``Generator`` for ``(seed, *key)``."""
    return np.random.default_rng(seed_sequence(seed, *key))


def derive_seed(seed, *key):
    """A 63-bit integer seed derived from ``(seed, *key)``."""
    state = seed_sequence(seed, *key).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
