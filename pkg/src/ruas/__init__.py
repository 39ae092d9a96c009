"""Retinex-inspired unrolled low-light enhancement with cooperative architecture search."""
__version__ = "0.1.0"
