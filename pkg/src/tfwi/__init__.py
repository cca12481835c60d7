"""Desk-scale data-driven full waveform inversion toolkit."""

__version__ = "0.1.0"
