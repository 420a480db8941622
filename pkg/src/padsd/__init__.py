"""Speculative decoding with pivot-aware acceptance on synthetic table models."""

__version__ = "0.1.0"
