"""Semantic-ID tokenization and popularity-bias diagnostics for generative recommenders."""
from ._accel import backend

__version__ = "0.1.0"
__all__ = ["backend", "__version__"]
