"""Numerical laboratory for the stochastic heat equation and its lattice
approximations by interacting diffusions."""

__version__ = "0.1.0"
