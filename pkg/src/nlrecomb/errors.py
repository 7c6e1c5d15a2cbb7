"""Exception types shared across the package."""


class RecombError(Exception):
    """Base class for all package errors."""


class CapacityExceeded(RecombError):
    """A dense representation would exceed the configured size cap."""


class DegenerateMarginal(RecombError, ValueError):
    """A single-site distribution has a probability outside (0, 1)."""


class DimensionMismatch(RecombError, ValueError):
    """Two objects disagree on site count or spin count."""


class NumericalBreakdown(RecombError, ArithmeticError):
    """Gram-Schmidt lost rank (near-duplicate spin values)."""


class DomainError(RecombError, ValueError):
    """A logarithm argument left the positive half-line.

    ``index`` is the offending spin index.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ConfigError(RecombError, ValueError):
    """Experiment configuration failed validation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
