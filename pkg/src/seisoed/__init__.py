"""Bayesian experimental design for seismic source inversion."""

__version__ = "0.1.0"
