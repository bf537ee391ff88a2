"""Discriminative STL pattern mining and calibrated confidence estimation."""

__version__ = "0.1.0"
