"""LightChain: a Skip Graph based blockchain with Proof-of-Validation."""

__version__ = "0.1.0"
