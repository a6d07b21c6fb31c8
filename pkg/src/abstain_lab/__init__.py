"""Predictor-rejector learning with abstention: losses, risk calculus, bounds and training."""

__version__ = "0.1.0"
