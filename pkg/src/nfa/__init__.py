"""Generalizable implicit neural representations for anisotropic volumes."""

__version__ = "0.1.0"
