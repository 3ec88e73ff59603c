"""Parameter-efficiency experiments on a desk-scale transformer encoder."""

__version__ = "0.1.0"
