"""Counter-based, splittable random streams (Philox keyed by a seed path)."""

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for the path ``(seed, *keys)``; all entries are non-negative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, keys)])))
