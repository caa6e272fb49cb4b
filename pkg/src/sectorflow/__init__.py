"""Generative models of aircraft ground tracks through an airspace sector."""

__version__ = "0.1.0"
