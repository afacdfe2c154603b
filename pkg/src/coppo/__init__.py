"""Coordinated proximal policy optimization on cooperative matrix games."""

__version__ = "0.1.0"
