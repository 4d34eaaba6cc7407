"""Probabilistic attribute embeddings for spoofed-speech detection and attribution."""

__version__ = "0.1.0"
