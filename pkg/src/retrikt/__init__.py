"""Desk-scale retrieval-based knowledge transfer pipeline."""

__version__ = "0.1.0"
