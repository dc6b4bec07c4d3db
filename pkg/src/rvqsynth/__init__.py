"""Probabilistic coarse-to-fine motion synthesis over RVQ codes."""

__version__ = "0.1.0"
