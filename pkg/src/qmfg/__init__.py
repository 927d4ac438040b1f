"""Quantum mean-field games: filtering, mean-field limits and feedback games for atoms."""

__version__ = "0.1.0"
