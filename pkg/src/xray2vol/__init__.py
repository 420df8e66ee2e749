"""Desk-scale single-image x-ray tomography pipeline."""

__version__ = "0.1.0"
