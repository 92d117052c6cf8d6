"""Large-degree limit of the one-step recursion map.

For s >= 0 the limit function is

    g(s) = E [ 1 / (1 + (pi2/pi1) exp(W)) ] - pi1,   W ~ Normal(-a s / 2, a s),

with a = 1 / (pi1 pi2^2). The two-dimensional Gaussian form with mean
s (mu1, mu2) and covariance s Sigma reduces to this one-dimensional
integral because the integrand depends only on the difference of the two
coordinates, whose variance is a and whose mean offset is -a/2 per unit s.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import expit, roots_hermite


@dataclass(frozen=True)
class GaussianLimitParams:
    """Mean vector, covariance and difference variance of the limit Gaussian."""

    mu1: float
    mu2: float
    sigma: np.ndarray
    a: float

    @classmethod
    def from_pi1(cls, pi1: float) -> "GaussianLimitParams":
        pi2 = 1.0 - pi1
        sigma = np.array([[1.0 / pi1, -1.0 / pi2], [-1.0 / pi2, pi1 / pi2**2]])
        sigma.flags.writeable = False
        return cls(
            mu1=1.0 / (2.0 * pi1),
            mu2=-(1.0 + pi2) / (2.0 * pi2**2),
            sigma=sigma,
            a=1.0 / (pi1 * pi2**2),
        )


@lru_cache(maxsize=128)
def _hermite(n: int):
    return roots_hermite(n)


def _check_pi1(pi1: float):
    if not 0.5 <= pi1 < 1.0:
        raise ValueError(f"pi1 must lie in [1/2, 1), got {pi1}")


def g_quadrature(pi1: float, s: float, order: int = 80) -> float:
    """Gauss-Hermite evaluation of the limit map at s.

    The node count scales with the standard deviation sqrt(a s) so that the
    unit-width transition of the integrand stays resolved; ``order`` is the
    node count per standard deviation (and the floor). Doubling the order
    moves the result by < 1e-10 throughout s <= 1.
    """
    _check_pi1(pi1)
    if s < 0.0:
        raise ValueError(f"s must be nonnegative, got {s}")
    if order < 20:
        raise ValueError(f"order must be at least 20, got {order}")
    if s == 0.0:
        return 0.0
    pi2 = 1.0 - pi1
    a = 1.0 / (pi1 * pi2**2)
    var = a * s
    nodes, weights = _hermite(order * max(1, math.ceil(math.sqrt(var))))
    w = math.sqrt(2.0 * var) * nodes - 0.5 * var  # W at the quadrature nodes
    vals = expit(math.log(pi1 / pi2) - w)
    return float(weights @ vals) / math.sqrt(math.pi) - pi1


def g_grid(pi1: float, s_values, order: int = 80) -> np.ndarray:
    return np.array([g_quadrature(pi1, float(s), order) for s in np.asarray(s_values)])


@dataclass(frozen=True)
class MCEstimate:
    value: float
    stderr: float


def g_montecarlo(pi1: float, s: float, num_samples: int, seed: int) -> MCEstimate:
    """Plain Monte Carlo estimate of the limit map, with standard error."""
    _check_pi1(pi1)
    if num_samples < 10_000:
        raise ValueError(f"num_samples must be at least 10^4, got {num_samples}")
    if s < 0.0:
        raise ValueError(f"s must be nonnegative, got {s}")
    if s == 0.0:
        return MCEstimate(value=0.0, stderr=0.0)
    pi2 = 1.0 - pi1
    a = 1.0 / (pi1 * pi2**2)
    rng = np.random.default_rng(seed)
    w = rng.normal(loc=-0.5 * a * s, scale=math.sqrt(a * s), size=num_samples)
    vals = expit(math.log(pi1 / pi2) - w)
    value = float(vals.mean()) - pi1
    stderr = float(vals.std(ddof=1)) / math.sqrt(num_samples)
    return MCEstimate(value=value, stderr=stderr)


@dataclass(frozen=True)
class SeriesCoefficients:
    c2: float
    c3: float


def series_coefficients(pi1: float) -> SeriesCoefficients:
    """Quadratic and cubic Maclaurin coefficients of the limit map."""
    _check_pi1(pi1)
    pi2 = 1.0 - pi1
    c2 = (1.0 - 6.0 * pi1 * pi2) / (2.0 * pi1 * pi2**2)
    c3 = (1.0 - 24.0 * pi1 * pi2 + 90.0 * (pi1 * pi2) ** 2) / (6.0 * pi1**2 * pi2**4)
    return SeriesCoefficients(c2=c2, c3=c3)


def g_series(pi1: float, s: float) -> float:
    """Cubic Maclaurin approximation s + c2 s^2 + c3 s^3 (small s only)."""
    c = series_coefficients(pi1)
    return s + c.c2 * s * s + c.c3 * s**3
