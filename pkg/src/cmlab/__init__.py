"""Desk-scale continual multilingual learning laboratory."""

__version__ = "0.1.0"
