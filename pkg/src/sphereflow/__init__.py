"""Continuous normalizing flows on hyperspheres."""

__version__ = "0.1.0"
