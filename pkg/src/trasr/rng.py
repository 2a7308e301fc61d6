"""Deterministic, named random streams.

Every stochastic component (init, dropout, SpecAugment, data synthesis,
shuffling) draws from its own stream keyed by a stable name, so adding a
module never perturbs the draws seen by the others.
"""

import zlib

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for `name`, reproducible across runs and platforms."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, key]))


class StreamCache:
    """Stateful named streams: repeated get() calls continue the same stream."""

    def __init__(self, seed: int):
        self.seed = seed
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            gen = stream(self.seed, name)
            self._streams[name] = gen
        return gen
