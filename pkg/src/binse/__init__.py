"""Binaural speech enhancement with a complex convolutional transformer."""

__version__ = "0.1.0"
