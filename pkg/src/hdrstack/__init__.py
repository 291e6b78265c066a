"""Noise-aware merging of HDR exposure stacks."""

from .estimators import EstimatorKind, HatParams, Observation, SaturatedPixelError, merge_stack
from .noise import CameraNoiseParams, Channel, ExposureMeta, bundled_profile, load_profile

__version__ = "0.1.0"

__all__ = [
    "CameraNoiseParams",
    "Channel",
    "EstimatorKind",
    "ExposureMeta",
    "HatParams",
    "Observation",
    "SaturatedPixelError",
    "bundled_profile",
    "load_profile",
    "merge_stack",
]
