"""Coupled Fokker-Planck / HJB solvers for state-constrained stochastic control."""

__version__ = "0.1.0"
