"""Confusion detection from raw eye-tracking data with a GRU + CNN fusion network."""

__version__ = "0.1.0"
