"""Numerical laboratory for smooth measures, resolvent potentials and positive continuous additive functionals."""

__version__ = "0.1.0"
