"""Tri-modal (speech/vision/text) decoder-only transformer toolkit."""

__version__ = "0.1.0"
