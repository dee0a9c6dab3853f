"""Codec-aware learned downsampling for adaptive-bitrate encoding ladders."""

__version__ = "0.1.0"
