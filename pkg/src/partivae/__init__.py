"""Reversed variational autoencoders for partition functions and sampling."""

__version__ = "0.1.0"

from partivae.errors import (
    CapacityError,
    ConfigError,
    DataError,
    DimensionError,
    EvaluationError,
    NoiseError,
    ParameterError,
    PartivaeError,
    TrainingError,
)

__all__ = [
    "__version__",
    "CapacityError",
    "ConfigError",
    "DataError",
    "DimensionError",
    "EvaluationError",
    "NoiseError",
    "ParameterError",
    "PartivaeError",
    "TrainingError",
]
