class ConfigError(ValueError):
    """Invalid user configuration (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite values during rendering or optimization (CLI exit code 3)."""
