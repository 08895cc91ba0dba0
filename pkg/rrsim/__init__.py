"""Trace-driven simulator of object-aware stereo rendering on NUMA multi-GPM systems."""

__version__ = "0.1.0"
