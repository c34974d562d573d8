"""Sparse personalized federated learning simulator with a linear sparse-recovery lab."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
