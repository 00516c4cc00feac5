"""Certified l2 robustness for nearest-centroid classifiers on smoothed embeddings."""

from .bounds import (
    ConfidenceInterval,
    clopper_pearson_lower,
    distance_ci,
    hoeffding_interval,
    phi_lower_bound,
    procedure_error_probability,
    std_normal_quantile,
)
from .certifier import CertificateResult, CertifyConfig, certify, radius_from_phi, se_radius
from .embedders import EmbedderSpec, build_embedder, embed_batch, embed_gradient
from .embedding import CentroidSet, InputVector, classify, distance, enroll
from .smoothing import SmoothingConfig, estimate_smoothed, extend_estimate

__version__ = "0.1.0"

__all__ = [
    "CentroidSet",
    "CertificateResult",
    "CertifyConfig",
    "ConfidenceInterval",
    "EmbedderSpec",
    "InputVector",
    "SmoothingConfig",
    "build_embedder",
    "certify",
    "classify",
    "clopper_pearson_lower",
    "distance",
    "distance_ci",
    "embed_batch",
    "embed_gradient",
    "enroll",
    "estimate_smoothed",
    "extend_estimate",
    "hoeffding_interval",
    "phi_lower_bound",
    "procedure_error_probability",
    "radius_from_phi",
    "se_radius",
    "std_normal_quantile",
]
