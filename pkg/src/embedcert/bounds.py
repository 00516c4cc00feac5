"""Confidence bounds used by the certifiers."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import betainc

# squared distance between unit vectors lies in [0, 4]; the paired products
# used to estimate it lie in [-4, 4]
PAIRED_PRODUCT_RANGE = 8.0
XI_SLACK = 1e-9
QUANTILE_CLAMP = 1e-15


class IdenticalCentroidsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    alpha: float
    # set when the whole interval for the squared distance was negative
    degenerate: bool = False

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError(f"lower {self.lower} exceeds upper {self.upper}")

    def __contains__(self, value: float) -> bool:
        return self.lower < value < self.upper


def hoeffding_halfwidth(n_samples: int, range_width: float, alpha: float) -> float:
    """Half-width t with P(|mean - E| >= t) <= alpha for n i.i.d. bounded samples."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    if range_width <= 0:
        raise ValueError("range_width must be positive")
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    return range_width * math.sqrt(math.log(2.0 / alpha) / (2.0 * n_samples))


def hoeffding_interval(samples, range_width: float, alpha: float) -> ConfidenceInterval:
    samples = np.asarray(samples, dtype=np.float64)
    mean = float(samples.mean())
    t = hoeffding_halfwidth(samples.size, range_width, alpha)
    return ConfidenceInterval(mean - t, mean + t, alpha)


def paired_products(first_half, second_half, centroids) -> np.ndarray:
    """u[j, k] = <f_j - c_k, f_{N+j} - c_k> for every pair j and centroid k.

    Expanded as <f_j, f_{N+j}> - <c_k, f_j + f_{N+j}> + |c_k|^2 so that all
    centroids are handled with one matrix product.
    """
    a = np.asarray(first_half, dtype=np.float64)
    b = np.asarray(second_half, dtype=np.float64)
    c = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"half sizes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or a.shape[1] != c.shape[1]:
        raise ValueError("embedding and centroid dimensions differ")
    own = np.sum(a * b, axis=1)
    return own[:, None] - (a + b) @ c.T + np.sum(c * c, axis=1)[None, :]


def _interval_from_squared(mean_sq: float, t: float, alpha: float) -> ConfidenceInterval:
    lo_sq, hi_sq = mean_sq - t, mean_sq + t
    if hi_sq < 0:
        return ConfidenceInterval(0.0, 0.0, alpha, degenerate=True)
    return ConfidenceInterval(math.sqrt(max(0.0, lo_sq)), math.sqrt(hi_sq), alpha)


def distance_ci(first_half, second_half, centroid, alpha: float) -> ConfidenceInterval:
    """Two-sided interval for ||g(x) - c|| from N paired per-sample embeddings.

    The paired products are i.i.d., unbiased for ||g - c||^2 and bounded in
    [-4, 4], so Hoeffding's inequality applies to their mean; the square root
    of the (clamped) endpoints bounds the distance itself.
    """
    u = paired_products(first_half, second_half, centroid)[:, 0]
    if u.size < 1:
        raise ValueError("need at least one pair")
    t = hoeffding_halfwidth(u.size, PAIRED_PRODUCT_RANGE, alpha)
    return _interval_from_squared(float(u.mean()), t, alpha)


def distance_cis(first_half, second_half, centroids, alpha: float) -> list[ConfidenceInterval]:
    """``distance_ci`` for every row of ``centroids`` at once."""
    u = paired_products(first_half, second_half, centroids)
    t = hoeffding_halfwidth(u.shape[0], PAIRED_PRODUCT_RANGE, alpha)
    return [_interval_from_squared(float(m), t, alpha) for m in u.mean(axis=0)]


def xi_values(per_sample, c1, c2) -> np.ndarray:
    """Per-sample projections <f_j, c1 - c2> / (2 |c1 - c2|), each in [-1/2, 1/2]."""
    diff = np.asarray(c1, dtype=np.float64) - np.asarray(c2, dtype=np.float64)
    norm = float(np.sqrt(np.dot(diff, diff)))
    if norm < 1e-12:
        raise IdenticalCentroidsError("the two centroids coincide")
    xi = np.asarray(per_sample, dtype=np.float64) @ diff / (2.0 * norm)
    if np.any(np.abs(xi) > 0.5 + XI_SLACK):
        raise AssertionError("projection outside [-1/2, 1/2]; embeddings or centroids not unit-norm")
    return xi


def phi_lower_bound(per_sample_all, c1, c2, alpha: float) -> float:
    """One-sided lower bound on phi = <g, c1 - c2> / (2|c1 - c2|) + 1/2.

    ``per_sample_all`` holds the 2N per-sample embeddings.  The returned value
    may be below 1/2 (or even negative); deciding what that means is left to
    the caller.
    """
    xi = xi_values(per_sample_all, c1, c2)
    if xi.size < 2:
        raise ValueError("need at least two samples")
    n_half = xi.size / 2.0
    return float(xi.mean()) + 0.5 - math.sqrt(math.log(2.0 / alpha) / (4.0 * n_half))


def phi_value(g, c1, c2) -> float:
    """phi evaluated at a given (smoothed) embedding, no confidence correction."""
    diff = np.asarray(c1, dtype=np.float64) - np.asarray(c2, dtype=np.float64)
    norm = float(np.sqrt(np.dot(diff, diff)))
    if norm < 1e-12:
        raise IdenticalCentroidsError("the two centroids coincide")
    return float(np.dot(g, diff)) / (2.0 * norm) + 0.5


def clopper_pearson_lower(successes: int, trials: int, alpha: float) -> float:
    """Exact one-sided binomial lower confidence bound at level 1 - alpha.

    Solves P(Bin(trials, p) >= successes) = alpha for p, written through the
    regularized incomplete beta function I_p(k, n - k + 1).
    """
    if trials < 1 or not 0 <= successes <= trials:
        raise ValueError("need 0 <= successes <= trials and trials >= 1")
    if successes == 0:
        return 0.0
    if successes == trials:
        return alpha ** (1.0 / trials)
    k, n = successes, trials
    return float(brentq(lambda p: betainc(k, n - k + 1, p) - alpha, 0.0, 1.0,
                        xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500))


# rational approximation coefficients (P. J. Acklam), relative error ~1e-9
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def _acklam(p: float) -> float:
    if p < _P_LOW:
        q = math.sqrt(-2.0 * math.log(p))
        return ((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    if p > 1.0 - _P_LOW:
        q = math.sqrt(-2.0 * math.log1p(-p))
        return -((((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5])
                 / ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1.0))
    q = p - 0.5
    r = q * q
    return ((((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q
            / (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1.0))


def _halley(x: float, p: float) -> float:
    # lower tail only (x <= 0): erfc keeps full relative accuracy there
    e = 0.5 * math.erfc(-x / math.sqrt(2.0)) - p
    u = e * math.sqrt(2.0 * math.pi) * math.exp(0.5 * x * x)
    return x - u / (1.0 + 0.5 * x * u)


def std_normal_quantile(p: float) -> float:
    """Inverse standard normal CDF, accurate to well below 1e-9 on [1e-15, 1 - 1e-15]."""
    p = min(max(float(p), QUANTILE_CLAMP), 1.0 - QUANTILE_CLAMP)
    if p == 0.5:
        return 0.0
    # evaluate on the lower half and reflect; 1 - p is exact for p >= 1/2
    if p > 0.5:
        q = 1.0 - p
        return -_halley(_acklam(q), q)
    return _halley(_acklam(p), p)


def procedure_error_probability(alpha: float, K: int) -> float:
    """Failure probability 1 - (1 - alpha)^(K + 1) of the adaptive certification."""
    if K < 2:
        raise ValueError("K must be at least 2")
    return -math.expm1((K + 1) * math.log1p(-alpha))
