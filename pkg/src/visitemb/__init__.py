"""Hybrid CNN/MLP visit embeddings for multi-label diagnosis-chapter prediction."""

__version__ = "0.1.0"
