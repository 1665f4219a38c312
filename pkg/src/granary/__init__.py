"""Desk-scale domain-adaptation pipeline for a tiny byte-level language model."""

__version__ = "0.1.0"
