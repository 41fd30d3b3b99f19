"""Optical-flow-free video stabilization by iterative frame interpolation."""

__version__ = "0.1.0"
