"""Multimodal point-cloud reconstruction: point and image tokens fused by cross-attention."""

__version__ = "0.1.0"
