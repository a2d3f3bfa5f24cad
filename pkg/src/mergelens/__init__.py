"""Merge small classifier checkpoints and compare behavioral and probing evaluations."""

__version__ = "0.1.0"
