"""Token-adaptive low-rank KV-cache compression, desk scale end to end.

Calibrate a spectral basis per layer and stream, learn a per-token
differentiable truncation gate inside a small transformer, and serve a
variable-rank KV cache with exact memory accounting and token eviction.
"""

__version__ = "0.1.0"

from dynakv.errors import (
    ConfigError,
    ContractViolationError,
    DimensionError,
    DynaKVError,
    EmptyStatsError,
    InsufficientDataError,
    InvertibilityError,
    NumericError,
    RankError,
)

__all__ = [
    "ConfigError",
    "ContractViolationError",
    "DimensionError",
    "DynaKVError",
    "EmptyStatsError",
    "InsufficientDataError",
    "InvertibilityError",
    "NumericError",
    "RankError",
    "__version__",
]
