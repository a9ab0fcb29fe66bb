"""Exception types shared across the package."""


class LavaError(Exception):
    """Base class for all package errors."""


class DimensionError(LavaError, ValueError):
    """Operand shapes do not conform."""


class NumericError(LavaError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ContractError(LavaError, ValueError):
    """A documented precondition was violated."""


class SingularMatrixError(LavaError, ArithmeticError):
    """Cholesky factorization failed; ``pivot`` is the 0-based failing index."""

    def __init__(self, message: str, pivot: int | None = None):
        super().__init__(message)
        self.pivot = pivot


class ConfigError(LavaError, ValueError):
    """Invalid or unknown configuration value."""


class IngestionError(LavaError, ValueError):
    """Input data file could not be turned into tasks."""


class CheckpointError(LavaError, ValueError):
    """Checkpoint is corrupt or incompatible with the requested architecture."""
