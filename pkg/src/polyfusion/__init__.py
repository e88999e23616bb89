"""Polynomial fusion layers with low-rank tensor parameterizations."""

__version__ = "0.1.0"
