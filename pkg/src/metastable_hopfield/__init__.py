"""Exact and asymptotic metastable exit times for generalized Hopfield models."""

__version__ = "0.1.0"
