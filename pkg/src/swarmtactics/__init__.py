"""Swarm engagement simulation, tactic classification, and trajectory
optimization against the classifier."""

__version__ = "0.1.0"
