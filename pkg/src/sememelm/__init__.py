"""Sememe-graph-enhanced relation representations for word analogy."""

__version__ = "0.1.0"
