"""Compression and acceleration toolkit for massive-MIMO CSI feedback models."""

__version__ = "0.1.0"
