"""Memory-augmented graph neural network for sequential recommendation."""

__version__ = "0.1.0"
