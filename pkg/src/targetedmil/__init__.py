"""Targeted multi-instance learning with a bag-conditioned VAE, on numpy."""

__version__ = "0.1.0"
