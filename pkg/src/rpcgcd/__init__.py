"""Relational pattern consistency for generalized category discovery."""

__version__ = "0.1.0"
