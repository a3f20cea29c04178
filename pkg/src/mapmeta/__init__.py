"""Location phrases and linked metadata from text labels on scanned maps."""

__version__ = "0.1.0"
