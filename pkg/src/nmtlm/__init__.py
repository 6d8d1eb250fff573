"""Desk-scale workbench comparing encoder-decoder and language-model translation architectures."""

__version__ = "0.1.0"
