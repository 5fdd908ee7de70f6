"""Graph-attention collaborative filtering with text-initialized node features."""

__version__ = "0.1.0"
