"""Longitudinal evaluation of biometric matchers from comparison scores."""

__version__ = "0.1.0"
