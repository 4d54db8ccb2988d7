"""Robust design optimization and extreme-value certification toolkit."""

__version__ = "0.1.0"
