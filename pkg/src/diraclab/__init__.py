"""Numerical laboratory for the semiclassical limit of 2D Dirac-Hartree dynamics."""
__version__ = "0.1.0"
