"""Numerical laboratory for random matrix products and renewal theory on SL_d(R)."""

__version__ = "0.1.0"
