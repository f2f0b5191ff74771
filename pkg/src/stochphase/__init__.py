"""Stochastic phase maps and phase reduction for noisy oscillators."""

__version__ = "0.1.0"
