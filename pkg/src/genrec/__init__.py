"""Multimodal generative recommendation over residual-quantized semantic IDs."""

__version__ = "0.1.0"
