"""Latent flow-matching representation learning and guided multi-objective
optimization on an exactly evaluable toy molecular domain."""

__version__ = "0.1.0"
