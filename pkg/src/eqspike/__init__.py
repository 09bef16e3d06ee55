"""Extremely weight-quantized spiking encoder with equilibrium training."""

__version__ = "0.1.0"
