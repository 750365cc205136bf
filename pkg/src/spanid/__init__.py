"""Differentiable truss-bridge and train simulation with gradient-based damage identification."""

__version__ = "0.1.0"
