"""Exception types shared across the package."""


class LorexError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(LorexError, ValueError):
    """Tensor dimensions do not satisfy an operation's contract."""


class ConfigError(LorexError, ValueError):
    """A configuration value is outside its documented valid range."""


class DataError(LorexError, RuntimeError):
    """Dataset contents violate an invariant (missing labels, foreign batches, ...)."""


class NumericError(LorexError, ArithmeticError):
    """A computation produced or consumed non-finite values."""


class CheckpointError(LorexError, RuntimeError):
    """A checkpoint file is malformed or incompatible."""
