"""Numerical laboratory for nonlinear mean-field Stackelberg games."""

__version__ = "0.1.0"
