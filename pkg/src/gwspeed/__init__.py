"""Biased random walks on Galton-Watson trees: speed and its derivative by regeneration blocks."""

from .offspring import OffspringLaw, extinction_probability, lambda_c
from .tree import TreeArena, TreeSpec

__version__ = "0.1.0"

__all__ = ["OffspringLaw", "TreeArena", "TreeSpec", "extinction_probability", "lambda_c", "__version__"]
