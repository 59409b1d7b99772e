"""Shape reconstruction for multi-chamber pneumatic soft robots from in-chamber light sensors."""

__version__ = "0.1.0"
