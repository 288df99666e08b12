"""Quasi-Newton Metropolis-Hastings for parameter inference in state-space models."""

__version__ = "0.1.0"
