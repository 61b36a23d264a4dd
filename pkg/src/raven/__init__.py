"""Chirp-streaming radar perception with state-space encoders."""

__version__ = "0.1.0"
