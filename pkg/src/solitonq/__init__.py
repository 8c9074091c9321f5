"""Quantum soliton dynamics in reduced supermode descriptions."""

__version__ = "0.1.0"
