"""Radiance-field deblurring with event-supervised per-exposure camera trajectories."""

from .errors import ConfigError, NumericalError

__all__ = ["ConfigError", "NumericalError"]
__version__ = "0.1.0"
