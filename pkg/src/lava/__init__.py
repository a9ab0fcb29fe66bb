"""Variance-reduced gradient-based meta-learning via per-point Laplace fusion."""

__version__ = "0.1.0"
