"""Open-world object discovery toolkit."""

__version__ = "0.1.0"
