"""Bias laboratory: train a small CNN on a planted-bias synthetic benchmark, find the bias, mitigate it."""

__version__ = "0.1.0"
