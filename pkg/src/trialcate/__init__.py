"""Causal-forest CATE estimation that generalizes from a trial to its source population."""

__version__ = "0.1.0"
