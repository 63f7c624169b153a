"""Multimodal volume + metadata classifier with cross-attention fusion and channel mixing."""

__version__ = "0.1.0"
