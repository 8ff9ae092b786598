"""Noise-enhanced supervised autoencoder for cross-domain few-shot learning."""

__version__ = "0.1.0"
