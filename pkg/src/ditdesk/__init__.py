"""Desk-scale document image transformer pipeline."""

__version__ = "0.1.0"
