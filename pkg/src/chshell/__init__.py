"""Isogeometric Cahn-Hilliard phase separation on deforming thin shells."""

__version__ = "0.1.0"
