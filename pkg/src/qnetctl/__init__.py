"""Orchestrator for a simulated three-site polarization-entanglement network."""

__version__ = "0.1.0"
