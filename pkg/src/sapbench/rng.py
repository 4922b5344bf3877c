"""Named, reproducible random streams.

Every stochastic component takes an explicit ``numpy.random.Generator``.
Streams are derived from a master seed plus a path of keys so that two
components never share state, and a component's draws do not depend on
how many draws any other component made.
"""

import zlib

import numpy as np


def _key(k):
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def stream(seed, *keys):
    """Return a Generator determined entirely by ``seed`` and ``keys``."""
    return np.random.default_rng(np.random.SeedSequence([_key(seed), *map(_key, keys)]))


def child(rng, *keys):
    """Derive an independent generator from an existing one.

    Draws one 64-bit word from ``rng``; the parent stream advances.
    """
    base = int(rng.integers(0, 2**63 - 1))
    return stream(base, *keys)
