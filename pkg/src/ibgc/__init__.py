"""Invertible-network generative classifier on synthetic image data."""

__version__ = "0.1.0"
