"""Multitask 3D tumor embeddings and retrieval on synthetic phantoms."""

__version__ = "0.1.0"
