"""Continual linear regression: estimators, error theory and a Monte Carlo lab."""

__version__ = "0.1.0"
