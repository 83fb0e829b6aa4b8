"""Stochastic contagion and cyber-insurance loss simulation."""

__version__ = "0.1.0"
