"""Synthetic X-ray dataset generation and promptable-segmentation math."""

__version__ = "0.1.0"
