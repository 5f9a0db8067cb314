"""Multiresolution factorization of symmetric matrices.

A library and CLI for factorizing a dense symmetric matrix into a chain of
sparse k-point rotations around a small core, with three ways to pick the
rotation supports (policy-gradient search, greedy pair scanning, random
column sampling), a graph-wavelet toolkit built on top of the rotation
chain, and a small spectral network that classifies graph nodes in the
resulting wavelet basis.
"""

from mrfact import errors
from mrfact._kern import backend_name, extension_active

__version__ = "0.1.0"

__all__ = ["errors", "backend_name", "extension_active", "__version__"]
