"""Acoustic shadow detection and confidence estimation for ultrasound-like images."""

__version__ = "0.1.0"
