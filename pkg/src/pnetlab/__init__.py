"""Simulated privacy-preserving networks, query attacks and output-noise defenses."""

__version__ = "0.1.0"
