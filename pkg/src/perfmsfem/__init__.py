"""Multiscale finite elements for advection-diffusion in perforated domains."""

__version__ = "0.1.0"
