"""Gradient-flow diagnostics for the heat equation on Carnot groups."""
__version__ = "0.1.0"
