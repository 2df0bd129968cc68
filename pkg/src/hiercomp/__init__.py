"""Scalable exact inference for Gaussian hierarchical models."""
__version__ = "0.1.0"
