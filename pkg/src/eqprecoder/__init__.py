"""Equivariant precoder learning for weighted sum rate maximization."""
__version__ = "0.1.0"
