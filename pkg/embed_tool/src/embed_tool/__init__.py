"""Offline embedding exporter for the friction-from-vision cache format."""

__version__ = "0.1.0"
