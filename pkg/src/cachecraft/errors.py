"""Exception types shared across the package."""


class CacheCraftError(Exception):
    """Base class for all package errors."""


class ConfigError(CacheCraftError):
    """Invalid model or store configuration."""


class ShapeError(CacheCraftError):
    """Array arguments with incompatible shapes."""


class ArgumentError(CacheCraftError, ValueError):
    """Invalid argument value."""


class PlanError(CacheCraftError):
    """Inconsistent inference plan or prefill request."""


class NotFoundError(CacheCraftError, KeyError):
    """Referenced variant does not exist."""


class InfeasibleError(CacheCraftError):
    """No calibration candidate meets the quality target."""

    def __init__(self, message, best_quality=None):
        super().__init__(message)
        self.best_quality = best_quality


class PlacementError(CacheCraftError):
    """Tier placement cannot satisfy the byte budgets."""


class IoError(CacheCraftError):
    """Report or snapshot could not be written or read."""
