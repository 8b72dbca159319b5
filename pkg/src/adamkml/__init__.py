"""Adaptation-aware kernel modulation for few-shot GAN adaptation, at desk scale."""

__version__ = "0.1.0"
