"""Drift-based latent vicinity transport for source-free domain adaptation."""

__version__ = "0.1.0"
