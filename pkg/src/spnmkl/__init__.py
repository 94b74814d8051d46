"""Multiple kernel learning with SPN-structured kernel combinations."""

__version__ = "0.1.0"
