"""Magnetic geodesic flows, attenuated magnetic ray transforms and fiberwise analysis on the disk."""

__version__ = "0.1.0"
