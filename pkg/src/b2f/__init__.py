"""Optical flow estimation from a single motion-blurred image."""

__version__ = "0.1.0"
