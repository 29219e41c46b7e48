"""Assortative matching simulator with an attention actor-critic trainer."""

__version__ = "0.1.0"
