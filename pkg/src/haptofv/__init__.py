"""Finite-volume simulator and verification harness for degenerate anisotropic haptotaxis."""

__version__ = "0.1.0"
