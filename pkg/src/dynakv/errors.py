"""Exception types shared across the package."""


class DynaKVError(Exception):
    """Base class for all package errors."""


class DimensionError(DynaKVError):
    """Operand shapes are incompatible."""


class RankError(DynaKVError):
    """Requested retained length is outside [1, d_kv]."""


class InvertibilityError(DynaKVError):
    """Matrix is singular or too ill-conditioned to invert."""

    def __init__(self, message, cond_estimate=None):
        super().__init__(message)
        self.cond_estimate = cond_estimate


class InsufficientDataError(DynaKVError):
    """Not enough calibration samples to estimate a covariance."""


class EmptyStatsError(DynaKVError):
    """Aggregation requested over zero retain-rate samples."""


class ContractViolationError(DynaKVError):
    """An input violated a documented precondition (e.g. non-monotone mask)."""


class NumericError(DynaKVError):
    """Non-finite values appeared where finite ones are required."""


class ConfigError(DynaKVError):
    """A run configuration failed schema validation."""
