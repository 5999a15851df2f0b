"""Multilingual non-autoregressive translation over directed acyclic lattices."""

__version__ = "0.1.0"
