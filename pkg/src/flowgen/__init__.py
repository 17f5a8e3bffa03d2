"""Conditional score-based diffusion for statistical simulation of chaotic
systems, with solvable toy problems, a 2D spectral fluid solver, and a
probabilistic verification suite."""

__version__ = "0.1.0"

from ._kernels import BACKEND as KERNEL_BACKEND  # noqa: F401
