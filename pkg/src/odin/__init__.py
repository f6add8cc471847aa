"""Text-attributed graph encoder with layer-aligned structural injection."""

__version__ = "0.1.0"
