"""Rician corruption of magnitude volumes.

Both quadrature channels receive i.i.d. Gaussian noise of standard deviation
``alpha * level``, where ``alpha`` is the maximum of the clean volume::

    A = sqrt((I + alpha*level*n_r)**2 + (alpha*level*n_i)**2)
"""
from dataclasses import dataclass

import numpy as np

from mrdenoise.errors import ConfigError, DomainError

STANDARD_LEVELS = (0.03, 0.09, 0.15)


@dataclass(frozen=True)
class NoiseSpec:
    level: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.level <= 1.0:
            raise ConfigError(f"noise level must lie in [0, 1], got {self.level}")


def make_stream(seed):
    return np.random.Generator(np.random.PCG64(seed))


def standard_normal(stream, n):
    """``n`` i.i.d. N(0, 1) float64 draws from a seeded generator."""
    return stream.standard_normal(n)


def derive_seed(seed, *keys):
    """Independent child seed for e.g. the i-th volume of a run."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, np.uint64)[0])


def add_rician(volume, spec):
    """Return a float32 noisy copy of ``volume``.

    Draws for voxel ``k`` (row-major) are ``n_r = z[2k]``, ``n_i = z[2k+1]``
    from a single stream seeded with ``spec.seed``. The arithmetic runs in
    float64, so ``level == 0`` reproduces a float32 input exactly.
    """
    vol = np.asarray(volume)
    if np.any(vol < 0):
        raise DomainError("Rician noise needs a non-negative magnitude volume")
    vol = vol.astype(np.float64)
    alpha = float(vol.max()) if vol.size else 0.0
    sigma = alpha * spec.level
    z = standard_normal(make_stream(spec.seed), 2 * vol.size).reshape(vol.shape + (2,))
    real = vol + sigma * z[..., 0]
    imag = sigma * z[..., 1]
    return np.sqrt(real * real + imag * imag).astype(np.float32)
