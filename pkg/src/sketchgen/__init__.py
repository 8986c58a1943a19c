"""Sketch-to-photo generation with a frozen style-based decoder and an
autoregressive sketch-to-latent mapper."""

__version__ = "0.1.0"
