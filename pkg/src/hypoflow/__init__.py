"""Numerical laboratory for the kinetic Fokker-Planck operator in a confining potential."""
__version__ = "0.1.0"
