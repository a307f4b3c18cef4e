"""Splittable, explicitly threaded random number generation.

Every stochastic operation in the package takes an ``Rng`` argument; there is
no global generator. Splitting is hierarchical and deterministic: a parent
seeded with the same value always produces the same children, and children
split with distinct keys are statistically independent.
"""

from __future__ import annotations

import hashlib

import numpy as np


class Rng:
    """Thin wrapper over ``numpy.random.Generator`` with keyed splitting."""

    def __init__(self, seed):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self.gen = np.random.default_rng(self._seq)

    def split(self, key) -> "Rng":
        """Derive an independent child generator from a string or int key."""
        digest = hashlib.blake2b(str(key).encode(), digest_size=8).digest()
        child = np.random.SeedSequence(
            entropy=self._seq.entropy,
            spawn_key=self._seq.spawn_key + (int.from_bytes(digest, "little"),),
        )
        return Rng(child)

    # Convenience passthroughs; all return float64 / int64 arrays.
    def normal(self, shape=()):
        return self.gen.standard_normal(shape)

    def uniform(self, low=0.0, high=1.0, shape=()):
        return self.gen.uniform(low, high, shape)

    def integers(self, low, high, shape=()):
        return self.gen.integers(low, high, size=shape)

    def choice(self, n, p=None):
        return int(self.gen.choice(n, p=p))

    def permutation(self, n):
        return self.gen.permutation(n)
