"""Event-driven simulation and verification suite for self-catalytic critical
branching random walks on lattice tori."""

__version__ = "0.1.0"
