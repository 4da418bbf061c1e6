"""Cross-domain membership inference against graph neural networks."""

__version__ = "0.1.0"
