"""Desk-scale SAM/CLIP fusion network for human parsing."""

__version__ = "0.1.0"
