"""Robust heavy-traffic control of a multiclass single-server queue."""

__version__ = "0.1.0"
