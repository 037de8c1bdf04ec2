"""Simulation and diagnostics for marked random connection models."""

__version__ = "0.1.0"
