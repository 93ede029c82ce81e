"""Workforce migration flux: extraction, gravity fits, pattern clustering and indices."""

__version__ = "0.1.0"
