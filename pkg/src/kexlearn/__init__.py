"""Active state learning of SSH servers and strict key exchange analysis."""

__version__ = "0.1.0"
