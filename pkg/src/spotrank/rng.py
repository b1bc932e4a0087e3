"""Counter-based random streams.

Every random draw in the package comes from a Philox generator addressed by
a tuple ``(seed, domain, *coordinates)``.  Streams with different
coordinates are statistically independent, and the numbers a stream
produces do not depend on which worker evaluates it or in what order.
"""

from __future__ import annotations

import numpy as np

# Domain tags keep streams for different purposes apart even when the
# numeric coordinates coincide.
PATH = 1
OBSERVATIONS = 2
JUMPS = 3
NOISE = 4
VALIDATION = 5
ORACLE = 6


def stream(seed: int, domain: int, *coords: int) -> np.random.Generator:
    """Return the generator for ``(seed, domain, *coords)``."""
    if seed < 0:
        raise ValueError("seed must be non-negative")
    key = (int(domain),) + tuple(int(c) for c in coords)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
