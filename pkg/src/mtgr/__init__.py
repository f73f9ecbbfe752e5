"""Generative ranking with a user-level HSTU encoder, on numpy."""

__version__ = "0.1.0"
