"""Frequency-energy routed low-rank adaptation for a toy diffusion model."""

__version__ = "0.1.0"
