"""Stateful memory-augmented Transformer encoder-decoders at desk scale."""

__version__ = "0.1.0"
