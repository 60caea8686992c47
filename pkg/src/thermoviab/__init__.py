"""Nodule viability classification from localized-cooling thermal video."""

__version__ = "0.1.0"
