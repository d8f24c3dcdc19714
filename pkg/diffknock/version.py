"""Versión de DiffKnock (fuente de verdad en runtime)."""

__version__ = "0.3.0"
