"""Exception types raised across the package."""


class HedgingError(Exception):
    """Base class for all package errors."""


class DomainError(HedgingError, ValueError):
    """Option terms outside the model's domain (non-positive spot, negative vol, ...)."""


class OutOfBoundsError(HedgingError, ValueError):
    """Target option price violates the no-arbitrage bounds."""


class ConvergenceError(HedgingError, RuntimeError):
    """An iterative solver or adaptive quadrature failed to converge."""


class UnitMismatchError(HedgingError, ValueError):
    """Ingested implied vols do not reprice the quoted mids (unit convention mismatch)."""


class MalformedFileError(HedgingError, ValueError):
    pass


class BucketRangeError(HedgingError, ValueError):
    pass


class EmptyPartitionError(HedgingError, ValueError):
    pass


class ShapeMismatchError(HedgingError, ValueError):
    pass


class StaleCacheError(HedgingError, RuntimeError):
    """Backward pass requested with a cache from a different parameter state."""


class NonFiniteGradientError(HedgingError, FloatingPointError):
    pass


class DivergenceError(HedgingError, FloatingPointError):
    """Training loss became non-finite."""


class SpecMismatchError(HedgingError, ValueError):
    """Sample features do not match the feature spec stored with a model."""


class DegenerateBenchmarkError(HedgingError, ZeroDivisionError):
    """Benchmark hedging error is identically zero, so the gain ratio is undefined."""


class ConfigError(HedgingError, ValueError):
    pass


class DegenerateGroupError(HedgingError, ZeroDivisionError):
    """A regression group has no spot variation (sum of squared spot moves is zero)."""
