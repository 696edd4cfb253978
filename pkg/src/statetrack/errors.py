"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Unknown or malformed configuration value."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ResourceError(RuntimeError):
    """The request would need an unreasonable amount of work or memory."""
