"""Latent behavioural state vectors from in-home location sensor streams."""

__version__ = "0.1.0"
