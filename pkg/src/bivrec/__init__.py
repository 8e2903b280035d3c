"""Bidirectional ID / multimodal multi-interest sequential recommender."""

__version__ = "0.1.0"
