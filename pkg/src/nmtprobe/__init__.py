"""Desk-scale NMT training plus layer-wise representation probing."""

__version__ = "0.1.0"
