"""Gaussian-splatting reconstruction and relocalization for unconstrained
photo collections."""

__version__ = "0.1.0"
