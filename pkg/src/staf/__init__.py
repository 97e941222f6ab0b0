"""Numpy reference implementation of a temporal video human-mesh-recovery pipeline."""

__version__ = "0.1.0"
