"""Bayesian fusion of Gaussian-process predictions.

Subpackages are imported explicitly (``gpfuse.kernel``, ``gpfuse.models``,
...) so that the command-line entry point can cap BLAS threading before any
numerical library loads.
"""

__version__ = "0.1.0"
