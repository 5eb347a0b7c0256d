"""Data-driven cooperative adaptive cruise control for mixed vehicle platoons."""

__version__ = "0.1.0"
