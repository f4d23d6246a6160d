from __future__ import annotations

import math
from fractions import Fraction
from typing import Sequence

import numpy as np

# Stream tags keep the derived random streams of one run independent.
TAG_PARTITION = 1
TAG_PERMUTE = 2
TAG_SELECT = 3
TAG_LOCAL = 4
TAG_FIM = 5
TAG_POOL = 6


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def ceil_fraction(ratio: float, n: int) -> int:
    """``ceil(ratio * n)`` evaluated on the decimal value of ``ratio``.

    ``0.3 * 100`` is ``30.000000000000004`` in binary floating point; going
    through the shortest decimal repr gives the intended 30.
    """
    return math.ceil(Fraction(repr(float(ratio))) * n)


def convex_combination(values: Sequence, weights: Sequence[float]):
    """Weighted mean of ``values`` in the given order.

    Computed as an offset from the first value so that equal inputs come
    back bit-for-bit unchanged and a single input is returned exactly.
    """
    total = math.fsum(weights)
    base = values[0]
    acc = base - base
    for v, w in zip(values[1:], weights[1:]):
        acc = acc + (w / total) * (v - base)
    return base + acc
