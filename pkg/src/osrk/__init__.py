"""Scattering-kernel initialized CNN features with reciprocal-point open-set recognition for SAR chips."""

__version__ = "0.1.0"
