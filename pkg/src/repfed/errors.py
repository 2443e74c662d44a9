class ConfigurationError(ValueError):
    """Bad shapes, out-of-range settings or malformed config files."""


class NumericError(ArithmeticError):
    """A non-finite value appeared in a loss, gradient or activation."""
