"""Text-guided point tracking on synthetic surgical clips."""

__version__ = "0.1.0"
