"""Discretized shortest paths between operating points of an AC-OPF feasible region."""

__version__ = "0.1.0"
