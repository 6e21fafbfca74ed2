"""Discretised Gaussian probabilities and the fixed-point parameter grid.

Encoder and decoder must build identical CDF tables, so the continuous
``(mu, sigma)`` predicted by a network is snapped to a shared lattice first:
``mu`` to multiples of 1/64 and ``sigma`` to one of 64 geometric levels.
"""

import numpy as np
from scipy.special import ndtr

PROB_FLOOR = 2.0 ** -16
SIGMA_MIN = 0.05
SIGMA_MAX = 256.0
SIGMA_LEVELS = np.geomspace(SIGMA_MIN, SIGMA_MAX, 64)
MU_SCALE = 64
ALPHABET_BOUND = 255

_LOG_SIGMA_MIN = np.log(SIGMA_MIN)
_LOG_SIGMA_STEP = np.log(SIGMA_LEVELS[1] / SIGMA_LEVELS[0])


def bin_mass(q, mu, sigma):
    """Gaussian mass on ``[q - 0.5, q + 0.5)``, evaluated on the short tail side."""
    q, mu, sigma = np.asarray(q), np.asarray(mu), np.asarray(sigma)
    a = (q - 0.5 - mu) / sigma
    b = (q + 0.5 - mu) / sigma
    return np.where(q - mu > 0, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))


def bin_probability(mu, sigma, q):
    """Unit-bin Gaussian probability of symbol ``q``, floored at 2^-16."""
    return np.maximum(bin_mass(q, mu, sigma), PROB_FLOOR)


def clamp_sigma(sigma):
    return np.clip(sigma, SIGMA_MIN, SIGMA_MAX)


def sigma_index(sigma):
    """Nearest geometric level (in log space) for each sigma."""
    s = np.log(clamp_sigma(np.asarray(sigma, dtype=np.float64)))
    return np.clip(np.rint((s - _LOG_SIGMA_MIN) / _LOG_SIGMA_STEP), 0, len(SIGMA_LEVELS) - 1).astype(np.int64)


def mu_code(mu, bound):
    """``mu`` in 1/64 units, clipped to the coded alphabet ``[-bound, bound]``."""
    m = np.rint(np.asarray(mu, dtype=np.float64) * MU_SCALE)
    return np.clip(m, -MU_SCALE * bound, MU_SCALE * bound).astype(np.int64)
