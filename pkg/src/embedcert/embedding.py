"""Inputs, embeddings and centroid sets; enrollment and nearest-centroid rule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Optional, Sequence

import numpy as np

METRICS = ("euclidean", "cosine")
UNIT_TOL = 1e-9


class DegenerateEnrollmentError(ValueError):
    """Mean of the enrollment embeddings is (numerically) the zero vector."""


def _as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-d vector, got shape {v.shape}")
    return v


def is_unit(v: np.ndarray, tol: float = UNIT_TOL) -> bool:
    return abs(float(np.sqrt(np.dot(v, v))) - 1.0) <= tol


@dataclass(frozen=True)
class InputVector:
    """A raw input sample (waveform-like, entries in [-1, 1])."""

    data: np.ndarray
    id: Hashable = None
    label: Optional[int] = None

    def __post_init__(self):
        data = _as_vector(self.data)
        if data.size < 1:
            raise ValueError("input vector must have at least one entry")
        if not np.all(np.isfinite(data)):
            raise ValueError("input vector has non-finite entries")
        if np.any(np.abs(data) > 1.0):
            raise ValueError("input entries must lie in [-1, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.size


@dataclass(frozen=True)
class CentroidSet:
    """K unit-norm enrollment vectors with distinct speaker labels."""

    centroids: np.ndarray
    labels: tuple = field(default=())
    metric: str = "euclidean"

    def __post_init__(self):
        c = np.array(self.centroids, dtype=np.float64)
        if c.ndim != 2:
            raise ValueError("centroids must be a (K, d) array")
        k = c.shape[0]
        if k < 2:
            raise ValueError(f"need at least 2 centroids, got {k}")
        norms = np.sqrt(np.sum(c * c, axis=1))
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("all centroids must be unit-norm")
        labels = tuple(self.labels) if len(self.labels) else tuple(range(k))
        if len(labels) != k:
            raise ValueError("one label per centroid required")
        if len(set(labels)) != k:
            raise ValueError("centroid labels must be distinct")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "labels", labels)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def index_of(self, label) -> int:
        return self.labels.index(label)


def distance(a, b, metric: str = "euclidean") -> float:
    """Euclidean distance or cosine distance ``1 - cos(a, b)``."""
    a = _as_vector(a)
    b = _as_vector(b)
    if a.shape != b.shape:
        raise ValueError("vectors must have equal length")
    if metric == "euclidean":
        diff = a - b
        return float(np.sqrt(np.dot(diff, diff)))
    if metric == "cosine":
        na = float(np.sqrt(np.dot(a, a)))
        nb = float(np.sqrt(np.dot(b, b)))
        if na == 0.0 or nb == 0.0:
            raise ValueError("cosine distance undefined for a zero vector")
        # clamp: rounding can push the cosine of parallel vectors past 1
        cos = min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb)))
        return 1.0 - cos
    raise ValueError(f"unknown metric {metric!r}")


def distances(query, centroids: CentroidSet) -> np.ndarray:
    """Distances from ``query`` to every centroid, under the set's metric."""
    q = _as_vector(query)
    return np.array([distance(q, c, centroids.metric) for c in centroids.centroids])


def nearest_index(query, centroids: CentroidSet) -> int:
    # np.argmin returns the first minimum, i.e. ties go to the lowest index
    return int(np.argmin(distances(query, centroids)))


def classify(query, centroids: CentroidSet):
    """Label of the closest centroid; ties are broken by lowest centroid index."""
    q = _as_vector(query)
    if not np.all(np.isfinite(q)):
        raise ValueError("query has non-finite entries")
    return centroids.labels[nearest_index(q, centroids)]


def classify_batch(queries: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid indices for rows of ``queries`` (unit-norm centroids).

    For unit-norm centroids both supported metrics rank centroids by the
    inner product, so a single matrix product serves both.
    """
    scores = np.asarray(queries) @ np.asarray(centroids).T
    return np.argmax(scores, axis=1)


def enroll(embeddings: Sequence) -> np.ndarray:
    """Speaker centroid: mean of M unit-norm embeddings, renormalized."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim == 1:
        e = e[None, :]
    if e.shape[0] < 1:
        raise ValueError("enrollment needs at least one embedding")
    norms = np.sqrt(np.sum(e * e, axis=1))
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError("enrollment embeddings must be unit-norm")
    mean = e.mean(axis=0)
    norm = float(np.sqrt(np.dot(mean, mean)))
    if norm < 1e-12:
        raise DegenerateEnrollmentError("enrollment embeddings average to zero")
    return mean / norm


def build_centroids(embeddings_by_label: dict, metric: str = "euclidean") -> CentroidSet:
    """Enroll every speaker; labels keep the mapping's iteration order."""
    labels = list(embeddings_by_label)
    cents = np.vstack([enroll(embeddings_by_label[k]) for k in labels])
    return CentroidSet(cents, tuple(labels), metric)
