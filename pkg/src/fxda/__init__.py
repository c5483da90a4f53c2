"""Desk-scale laboratory for neural-network satellite data assimilation."""

__version__ = "0.1.0"
