"""Radiance-field reconstruction from a single colour event stream."""

__version__ = "0.1.0"
