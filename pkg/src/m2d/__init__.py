"""Turn a trained classifier into an out-of-distribution detector."""

from m2d.detector import (
    DetectorBundle,
    GaussianHead,
    RetrainConfig,
    confidence,
    convert,
    fit_head,
    is_in_distribution,
    preprocess_input,
    retrain_encoder,
    score,
)
from m2d.nets import ModelSpec, Network, SurgeryPlan, build, duplicate, extract_features, sever_and_attach

__version__ = "0.1.0"

__all__ = [
    "DetectorBundle",
    "GaussianHead",
    "ModelSpec",
    "Network",
    "RetrainConfig",
    "SurgeryPlan",
    "build",
    "confidence",
    "convert",
    "duplicate",
    "extract_features",
    "fit_head",
    "is_in_distribution",
    "preprocess_input",
    "retrain_encoder",
    "score",
    "sever_and_attach",
]
