"""Robustness measurements for static malware detectors."""

__version__ = "0.1.0"
