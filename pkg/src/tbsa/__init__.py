"""Unified target-based sentiment tagging with boundary guidance."""

__version__ = "0.1.0"
