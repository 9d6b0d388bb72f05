"""Toy-scale image-to-video adapter on a pixel-space video diffusion model."""

from .errors import (
    ConfigurationError,
    DimensionError,
    FreezeViolation,
    I2VLabError,
    NumericError,
    StepIndexError,
    StructuralError,
    TrainingError,
)

__all__ = [
    "ConfigurationError",
    "DimensionError",
    "FreezeViolation",
    "I2VLabError",
    "NumericError",
    "StepIndexError",
    "StructuralError",
    "TrainingError",
]
__version__ = "0.1.0"
