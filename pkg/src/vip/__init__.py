"""Diagnostics for how a ViT's [CLS] output relates to its patch attention."""

__version__ = "0.1.0"
