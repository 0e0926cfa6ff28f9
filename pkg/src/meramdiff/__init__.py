"""Voltage-controlled MTJ noise generation and a diffusion model that consumes it."""

__version__ = "0.1.0"
