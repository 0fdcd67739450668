"""Named, splittable random streams.

Every stochastic piece of the engine draws from a stream derived from a
root seed plus a tuple of labels (purpose, stage, path index, ...). Two
streams with different labels are statistically independent, and the same
(seed, labels) pair always yields the same sequence, regardless of how
many other streams were consumed in between.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, *scope) -> np.random.Generator:
    """Return a Generator for the stream named by ``scope`` under ``seed``.

    Labels may be strings or integers; they are hashed into the spawn key
    of a SeedSequence, so stream identity depends only on the labels.
    """
    key = tuple(zlib.crc32(repr(part).encode("utf8")) for part in scope)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))
