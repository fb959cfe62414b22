"""Robust LQG controller learning for unknown open-loop-stable plants."""

__version__ = "0.1.0"
