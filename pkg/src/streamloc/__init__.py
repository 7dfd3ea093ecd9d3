"""Online spatio-temporal action localization and prediction from streaming video."""

__version__ = "0.1.0"
