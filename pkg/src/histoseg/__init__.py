"""Tile-based multi-task tissue segmentation and slide-level tumor detection."""

__version__ = "0.1.0"
