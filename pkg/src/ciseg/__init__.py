"""Continual segmentation with a growing query queue, on synthetic shapes."""

__version__ = "0.1.0"
