"""Periodic Laguerre tessellations, Gibbs sampling, and reconstruction."""

__version__ = "0.1.0"
