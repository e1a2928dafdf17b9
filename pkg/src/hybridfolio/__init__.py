"""Hybrid LSTM forecasting + clipped-surrogate RL portfolio allocation."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
