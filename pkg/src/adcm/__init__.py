"""Adaptive discretization for consistency models on low-dimensional toy data."""

__version__ = "0.1.0"
