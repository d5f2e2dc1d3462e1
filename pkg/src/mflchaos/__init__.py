"""Simulation and measurement toolkit for mean-field Langevin dynamics and its particle approximation."""

__version__ = "0.1.0"
