"""Weakly supervised crack segmentation for EL solar-cell images."""

__version__ = "0.1.0"
