"""Execution-grounded idea search and a toy RL loop over executed ideas."""

__version__ = "0.1.0"
