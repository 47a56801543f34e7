"""Fay-Herriot small area estimation with spectral clustering."""

__version__ = "0.1.0"
