"""Divide-and-conquer Gaussian-splatting reconstruction toolkit."""

__version__ = "0.1.0"
