"""Exactly sparse Gaussian variational inference on factor graphs."""

__version__ = "0.1.0"
