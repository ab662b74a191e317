"""Named random sub-streams derived from one run seed.

Each consumer (weight init, exploration, minibatch sampling, plant noise)
gets its own generator keyed by name, so adding or removing one consumer
never shifts the draws seen by another.
"""

import zlib

import numpy as np

DEFAULT_SEED = 20220101


def stream(seed, name):
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key]))


class Streams:
    def __init__(self, seed):
        self.seed = int(seed)
        self._cache = {}

    def __getitem__(self, name):
        if name not in self._cache:
            self._cache[name] = stream(self.seed, name)
        return self._cache[name]
