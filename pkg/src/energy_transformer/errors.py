"""Exception types shared across the package."""


class EtError(Exception):
    """Base class for all package errors."""


class InvalidInputError(EtError, ValueError):
    """Raised when an input contains NaN/inf or violates a precondition."""


class ShapeError(EtError, ValueError):
    """Raised when tensor shapes are inconsistent with the declared contract."""


class DegenerateMaskError(EtError, ValueError):
    """Raised when an attention mask leaves some token with no partner."""


class TapeError(EtError, RuntimeError):
    """Raised when a recorded computation is malformed or misused."""


class DivergenceError(EtError, RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""


class MetricUndefinedError(EtError, ValueError):
    """Raised when an evaluation metric is undefined for the given labels."""


class FormatError(EtError, ValueError):
    """Raised on malformed, truncated, or unsupported serialized data."""


class ConfigError(EtError, ValueError):
    """Raised on invalid run configuration (unknown keys, bad values)."""
