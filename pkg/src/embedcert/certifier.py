"""Certified radii for the smoothed nearest-centroid classifier.

Three methods share one entry point, :func:`certify`:

``ours``
    adaptive sampling until the two closest centroids are separated by their
    distance intervals, then ``R = sigma * Phi^-1(phi_hat)``;
``smoothed_embeddings``
    same sampling and abstention rules, radius from the Lipschitz bound of
    the smoothed embedding map;
``rs_classification``
    vanilla randomized smoothing of the hard nearest-centroid vote with a
    Clopper-Pearson bound on the top-class probability.

For unit-norm centroids the euclidean and cosine metrics rank centroids
identically (both by the inner product with the query), so the certificate
does not depend on the configured metric.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .bounds import (
    ConfidenceInterval,
    IdenticalCentroidsError,
    clopper_pearson_lower,
    distance_cis,
    phi_lower_bound,
    phi_value,
    procedure_error_probability,
    std_normal_quantile,
)
from .embedding import METRICS, CentroidSet, classify_batch
from .smoothing import (
    STREAM_FIRST_HALF,
    PairedEstimate,
    SmoothingConfig,
    embed_noisy,
    estimate_smoothed,
    extend_estimate,
)

METHODS = ("ours", "smoothed_embeddings", "rs_classification")
DEFAULT_N_INITIAL = 10_000


@dataclass(frozen=True)
class CertifyConfig:
    sigma: float = 1e-2
    alpha: float = 1e-3
    n_initial: Optional[int] = None
    n_max: int = 100_000
    method: str = "ours"
    metric: str = "euclidean"
    batch_size: int = 4096

    def __post_init__(self):
        if self.n_initial is None:
            object.__setattr__(self, "n_initial", max(1, min(DEFAULT_N_INITIAL, self.n_max // 2)))
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_initial < 1:
            raise ValueError("n_initial must be positive")
        if self.n_max < 2:
            raise ValueError("n_max must be at least 2")
        if self.n_initial > self.n_max:
            raise ValueError("n_initial must not exceed n_max")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")


@dataclass
class CertificateResult:
    predicted: object
    radius: Optional[float]
    abstained: bool
    samples_used: int
    method: str
    error_probability: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.abstained == (self.predicted is not None and self.radius is not None):
            raise ValueError("a certificate either abstains or carries prediction and radius")
        if self.radius is not None and self.radius < 0:
            raise ValueError("radius must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CertificateResult":
        return cls(**data)


def radius_from_phi(phi: float, sigma: float) -> float:
    """sigma * Phi^-1(phi); exactly 0 at phi = 1/2."""
    if phi == 0.5:
        return 0.0
    return sigma * std_normal_quantile(phi)


def se_radius(g, c1, c2, sigma: float) -> float:
    """Smoothed-embeddings radius for a known smoothed embedding ``g`` (may be negative)."""
    g = np.asarray(g, dtype=np.float64)
    d1 = float(np.sum((np.asarray(c1) - g) ** 2))
    d2 = float(np.sum((np.asarray(c2) - g) ** 2))
    return _se_formula(d2 - d1, c1, c2, sigma)


def _se_formula(numerator: float, c1, c2, sigma: float) -> float:
    sep = float(np.sum((np.asarray(c1, dtype=np.float64) - np.asarray(c2, dtype=np.float64)) ** 2))
    if sep < 1e-24:
        raise IdenticalCentroidsError("the two closest centroids coincide")
    return math.sqrt(math.pi * sigma ** 2 / 2.0) * numerator / (2.0 * sep)


def rank_centroids(intervals: list[ConfidenceInterval]) -> tuple[int, int, Optional[int]]:
    """Indices of the three smallest lower bounds (stable: ties keep index order).

    The third index is ``None`` when there are only two centroids.
    """
    order = sorted(range(len(intervals)), key=lambda k: intervals[k].lower)
    return order[0], order[1], (order[2] if len(order) > 2 else None)


def separation_holds(intervals, ranking, require_third: bool = False) -> bool:
    """u[i1] < l[i2] and u[i2] < l[iq].

    With two centroids there is no i_q and the second condition is dropped,
    unless ``require_third`` asks for the literal three-centroid rule, which
    then cannot be evaluated.
    """
    i1, i2, iq = ranking
    if iq is None:
        if require_third:
            raise ValueError("the three-centroid rule needs at least three centroids")
        return intervals[i1].upper < intervals[i2].lower
    return intervals[i1].upper < intervals[i2].lower and intervals[i2].upper < intervals[iq].lower


@dataclass
class _SeparationOutcome:
    estimate: PairedEstimate
    intervals: list
    ranking: tuple
    separated: bool


def _separate(x, embedder, centroids: CentroidSet, config: CertifyConfig, seed: int) -> _SeparationOutcome:
    smooth = SmoothingConfig(config.sigma, seed, config.batch_size)
    step = min(config.n_initial, config.n_max // 2)
    n = step
    est = estimate_smoothed(x, embedder, 2 * n, smooth, retain=True)
    while True:
        cis = distance_cis(est.per_sample_first, est.per_sample_second, centroids.centroids, config.alpha)
        ranking = rank_centroids(cis)
        if separation_holds(cis, ranking):
            return _SeparationOutcome(est, cis, ranking, True)
        # never draw more than n_max samples in total
        if 2 * (n + step) > config.n_max:
            return _SeparationOutcome(est, cis, ranking, False)
        est = extend_estimate(est, x, embedder, 2 * step, smooth)
        n += step


def _diagnostics(outcome: _SeparationOutcome) -> dict:
    i1, i2, iq = outcome.ranking
    return {
        "intervals": [[ci.lower, ci.upper] for ci in outcome.intervals],
        "ranking": [i1, i2, iq],
        "separated": outcome.separated,
        "n_per_half": outcome.estimate.n_per_half,
    }


def _abstain(method, samples, q, diag) -> CertificateResult:
    return CertificateResult(None, None, True, samples, method, q, diag)


def certify_ours(x, embedder, centroids: CentroidSet, config: CertifyConfig, seed: int = 0) -> CertificateResult:
    q = procedure_error_probability(config.alpha, centroids.K)
    out = _separate(x, embedder, centroids, config, seed)
    used = out.estimate.n_total
    diag = _diagnostics(out)
    if not out.separated:
        return _abstain("ours", used, q, diag)
    i1, i2, _ = out.ranking
    c1, c2 = centroids.centroids[i1], centroids.centroids[i2]
    phi_hat = phi_lower_bound(out.estimate.per_sample_all(), c1, c2, config.alpha)
    diag["phi_tilde"] = phi_value(out.estimate.g, c1, c2)
    diag["phi_hat"] = phi_hat
    if phi_hat < 0.5:
        return _abstain("ours", used, q, diag)
    return CertificateResult(centroids.labels[i1], radius_from_phi(phi_hat, config.sigma), False,
                             used, "ours", q, diag)


def certify_smoothed_embeddings(x, embedder, centroids: CentroidSet, config: CertifyConfig,
                                seed: int = 0) -> CertificateResult:
    q = procedure_error_probability(config.alpha, centroids.K)
    out = _separate(x, embedder, centroids, config, seed)
    used = out.estimate.n_total
    diag = _diagnostics(out)
    if not out.separated:
        return _abstain("smoothed_embeddings", used, q, diag)
    i1, i2, _ = out.ranking
    # g(x) is unknown: take the smallest squared-distance gap the intervals allow
    numerator = out.intervals[i2].lower ** 2 - out.intervals[i1].upper ** 2
    r = _se_formula(numerator, centroids.centroids[i1], centroids.centroids[i2], config.sigma)
    diag["se_numerator"] = numerator
    return CertificateResult(centroids.labels[i1], max(r, 0.0), False, used, "smoothed_embeddings", q, diag)


def certify_rs_classification(x, embedder, centroids: CentroidSet, config: CertifyConfig,
                              seed: int = 0) -> CertificateResult:
    smooth = SmoothingConfig(config.sigma, seed, config.batch_size)
    xa = np.asarray(getattr(x, "data", x), dtype=np.float64)
    counts = np.zeros(centroids.K, dtype=np.int64)
    step = max(smooth.batch_size, 1)
    for start in range(0, config.n_max, step):
        c = min(step, config.n_max - start)
        emb = embed_noisy(xa, embedder, smooth, STREAM_FIRST_HALF, start, c)
        counts += np.bincount(classify_batch(emb, centroids.centroids), minlength=centroids.K)
    top = int(np.argmax(counts))
    p_hat = clopper_pearson_lower(int(counts[top]), config.n_max, config.alpha)
    diag = {"counts": counts.tolist(), "p_hat": p_hat}
    if p_hat <= 0.5:
        return _abstain("rs_classification", config.n_max, config.alpha, diag)
    return CertificateResult(centroids.labels[top], config.sigma * std_normal_quantile(p_hat), False,
                             config.n_max, "rs_classification", config.alpha, diag)


_DISPATCH = {
    "ours": certify_ours,
    "smoothed_embeddings": certify_smoothed_embeddings,
    "rs_classification": certify_rs_classification,
}


def certify(x, embedder, centroids: CentroidSet, config: CertifyConfig, seed: int = 0) -> CertificateResult:
    return _DISPATCH[config.method](x, embedder, centroids, config, seed)
