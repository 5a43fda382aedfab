"""Seeded random streams.

Every stream is a numpy ``Generator`` over the counter-based Philox
bit generator, keyed by ``SeedSequence(seed, spawn_key=(crc32(name),))``.
Both pieces are documented and platform independent, so a given
``(seed, name)`` pair always produces the same values.  Streams are named
("batch/0", "refresh/2", ...) so that adding a block or a purpose does not
shift any other stream.
"""

import zlib

import numpy as np


def _name_key(name):
    return zlib.crc32(name.encode("utf-8"))


class Rng:
    def __init__(self, seed):
        seed = int(seed)
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._streams = {}

    def stream(self, name):
        gen = self._streams.get(name)
        if gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=(_name_key(name),))
            gen = np.random.Generator(np.random.Philox(ss))
            self._streams[name] = gen
        return gen

    def __repr__(self):
        return f"Rng(seed={self.seed}, streams={sorted(self._streams)})"


def as_generator(rng, name="default"):
    """Accept either an :class:`Rng` (uses stream ``name``) or a numpy Generator."""
    if isinstance(rng, Rng):
        return rng.stream(name)
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected Rng or numpy Generator, got {type(rng).__name__}")
