"""Sparse masked-autoencoder building blocks on a small reverse-mode tape."""

__version__ = "0.1.0"
