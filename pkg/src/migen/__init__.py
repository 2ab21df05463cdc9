"""Multiple-instance report generation with position-aware encoders."""

__version__ = "0.1.0"
