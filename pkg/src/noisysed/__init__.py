"""Noise-robust sound event detection with noise augmentation and text-queried separation."""

__version__ = "0.1.0"
