"""Proof-of-Learning blockchain simulator and protocol library."""

__version__ = "0.1.0"
