"""Penalized distributed-lag Lee-Carter modelling of weekly regional mortality."""

__version__ = "0.1.0"
