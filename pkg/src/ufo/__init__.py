"""Unified vision-language transformer: one network as image encoder, text encoder and fusion encoder."""

__version__ = "0.1.0"
