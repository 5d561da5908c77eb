"""Guided diffusion over articulated-object graphs."""

__version__ = "0.1.0"
