"""Sparse feature prompting for frozen graph neural networks."""

__version__ = "0.1.0"
