"""Rotary vs relative positional embeddings: kernels, invariants and timing."""

__version__ = "0.1.0"
