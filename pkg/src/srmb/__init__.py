"""Selective state-space sequence modeling with a bidirectional gated decoder."""

__version__ = "0.1.0"
