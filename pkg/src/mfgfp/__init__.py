"""Approximate fictitious play for discrete-time mean field games on a grid."""

__version__ = "0.1.0"
