"""Cooperative BEV perception sandbox with deterministic desk-scale components."""

__version__ = "0.1.0"
