"""Numerical dynamical R-matrices, weighted traces, and q-difference operators."""

from .cartan import CartanDatum, Weight, build_cartan, preset

__all__ = [
    "CartanDatum",
    "Weight",
    "build_cartan",
    "preset",
]

__version__ = "0.1.0"
