"""Tensor-train convolution factorization and one-shot layer selection for CNNs."""

__version__ = "0.1.0"
