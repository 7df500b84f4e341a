"""Counter-based seed derivation.

One global seed fans out into independent streams, one per purpose. A
stream is addressed by ``(seed, domain, *counters)``; its generator is
numpy's ``Philox`` bit generator keyed by
``SeedSequence(seed, spawn_key=(DOMAINS[domain], *counters))``. Adding a
new domain or counter never perturbs the existing streams.
"""

from __future__ import annotations

import numpy as np

DOMAINS = {
    "schedule": 1,
    "init": 2,
    "data": 3,
    "batch": 4,
    "partition": 5,
    "split": 6,
}


def seed_sequence(seed: int, domain: str, *counters: int) -> np.random.SeedSequence:
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    key = (DOMAINS[domain],) + tuple(int(c) for c in counters)
    return np.random.SeedSequence(int(seed), spawn_key=key)


def derive_rng(seed: int, domain: str, *counters: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed, domain, *counters)))


def derive_seed(seed: int, domain: str, *counters: int) -> int:
    """A 63-bit integer seed, e.g. for ``torch.manual_seed``."""
    state = seed_sequence(seed, domain, *counters).generate_state(1, np.uint64)[0]
    return int(state) & 0x7FFF_FFFF_FFFF_FFFF
