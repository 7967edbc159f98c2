"""Weakly supervised filtering of empty camera-trap images."""

__version__ = "0.1.0"
