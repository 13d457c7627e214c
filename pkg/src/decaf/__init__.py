"""Desk-scale neural-field reconstruction for intensity diffraction tomography."""

__version__ = "0.1.0"
