"""Subspace training, learned quantization, arithmetic coding, and
PAC-Bayes error certificates for small neural networks."""

__version__ = "0.1.0"
