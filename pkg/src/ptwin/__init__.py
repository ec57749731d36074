"""Porosity digital-twin pipeline: LPBF thermal sequences to CT pore counts and maps."""

__version__ = "0.1.0"
