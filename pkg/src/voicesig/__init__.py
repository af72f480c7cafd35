"""Interval signatures and hash chaining for non-repudiable two-way voice calls."""

__version__ = "0.1.0"
