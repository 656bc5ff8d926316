"""Friction-aware locomotion laboratory for a wheeled inverted pendulum."""

__version__ = "0.1.0"
