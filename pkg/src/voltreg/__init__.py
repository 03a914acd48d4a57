"""Coordinated OLTC and smart-inverter voltage regulation for unbalanced feeders."""

__version__ = "0.1.0"
