"""Stochastic activation pruning workbench: defenses, attacks, training and evaluation."""

__version__ = "0.1.0"
