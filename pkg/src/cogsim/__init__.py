"""Medication-conditioned virtual-patient simulation engine."""

__version__ = "0.1.0"
