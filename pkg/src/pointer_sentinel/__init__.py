"""LSTM language models with a sentinel-gated pointer, on a small reverse-mode tape."""

__version__ = "0.1.0"
