"""Realized-volatility forecasting: HAR regressions, machine-learning models and their evaluation."""

__version__ = "0.1.0"

from volfit.errors import VolfitError  # noqa: E402,F401
