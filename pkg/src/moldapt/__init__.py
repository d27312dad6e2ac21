"""Molecular-transformer domain-adaptation pipeline."""

__version__ = "0.1.0"
