"""Latin hypercube sampling over the normalized knob space.

Produces the space-filling design used to build the prediction-model
dataset: n points such that along every dimension each of the n
equal-width strata contains exactly one point.

Randomness comes from ``numpy.random.default_rng`` (PCG64), so a fixed
seed reproduces the same batch across runs and platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """An (n, k) array of unit-cube points plus the seed that produced it."""

    points: np.ndarray
    seed: int


def lhs_sample(k: int, n: int, seed: int, midpoint: bool = False) -> SampleBatch:
    """Draw a Latin hypercube sample of n points in [0, 1)^k.

    For every dimension d and stratum i in {0..n-1}, exactly one point
    has component in [i/n, (i+1)/n). Placement within a stratum is a
    uniform random offset by default; ``midpoint=True`` pins each point
    to the stratum center for reproducible documentation examples.
    """
    if k < 1:
        raise ConfigError("lhs_sample: need at least one dimension")
    if n < 1:
        raise ConfigError("lhs_sample: need at least one sample")
    rng = np.random.default_rng(seed)
    points = np.empty((n, k), dtype=float)
    for d in range(k):
        perm = rng.permutation(n)
        offsets = np.full(n, 0.5) if midpoint else rng.random(n)
        points[:, d] = (perm + offsets) / n
    return SampleBatch(points=points, seed=seed)
