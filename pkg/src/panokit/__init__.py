"""Seam-consistent panoramic video object segmentation toolkit."""

__version__ = "0.1.0"
