"""Decoding image latents from MEG epochs: data formats, models, training and evaluation."""

__version__ = "0.1.0"
