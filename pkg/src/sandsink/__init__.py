"""Sandpile and avalanche models with dissipative and source sites."""

__version__ = "0.1.0"
