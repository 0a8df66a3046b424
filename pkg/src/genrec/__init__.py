"""Generative recommendation: multimodal item representations quantized into Rec-IDs, decoded by a Transformer."""

__version__ = "0.1.0"
