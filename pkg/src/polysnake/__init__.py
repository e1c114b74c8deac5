"""Trainable active contours with learned per-pixel energy maps."""

__version__ = "0.1.0"
