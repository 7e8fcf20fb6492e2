"""Exact oracles and desk-scale learners for SAT-derived weighted languages."""

__version__ = "0.1.0"
