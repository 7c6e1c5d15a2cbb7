"""Exact and Monte Carlo tools for uniform recombination on finite product spaces."""

from .errors import (
    CapacityExceeded,
    ConfigError,
    DegenerateMarginal,
    DimensionMismatch,
    DomainError,
    NumericalBreakdown,
    RecombError,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityExceeded",
    "ConfigError",
    "DegenerateMarginal",
    "DimensionMismatch",
    "DomainError",
    "NumericalBreakdown",
    "RecombError",
    "__version__",
]
