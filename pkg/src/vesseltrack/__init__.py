"""Vessel centerline tracking with a direction-classifying 3D CNN."""

__version__ = "0.1.0"
