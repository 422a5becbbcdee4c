"""Detector backends: the contract, a synthetic simulator and a subprocess bridge."""

from .base import DetectorBackend, ModelHandle
from .external import ExternalBackend
from .synthetic import (
    SyntheticBackend,
    SyntheticBackendConfig,
    SyntheticModel,
    learned_sensitivity,
    make_synthetic_world,
    synthetic_predict,
    synthetic_train,
)

__all__ = [
    "DetectorBackend",
    "ExternalBackend",
    "ModelHandle",
    "SyntheticBackend",
    "SyntheticBackendConfig",
    "SyntheticModel",
    "learned_sensitivity",
    "make_synthetic_world",
    "synthetic_predict",
    "synthetic_train",
]
