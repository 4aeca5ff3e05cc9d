"""Exception types shared across the package."""


class HatError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(HatError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigError(HatError, ValueError):
    """A model, training or run configuration is invalid."""


class UsageError(HatError, ValueError):
    """An operation was called with arguments outside its contract."""


class FormatError(HatError, ValueError):
    """A file does not follow the expected on-disk format."""


class NonFiniteError(HatError, FloatingPointError):
    """A NaN or infinity appeared where only finite values are allowed."""
