"""Weakly supervised sea ice type segmentation from polygon-level ice charts."""

__version__ = "0.1.0"
