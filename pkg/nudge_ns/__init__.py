"""Projection and penalty Navier-Stokes solvers with continuous data assimilation."""

__version__ = "0.3.0"
