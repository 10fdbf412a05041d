"""Isometric tensor networks optimized with reverse-mode differentiation."""

__version__ = "0.1.0"
