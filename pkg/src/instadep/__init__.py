"""Modeling instantaneous dependence in stochastic transitions."""

__version__ = "0.1.0"
