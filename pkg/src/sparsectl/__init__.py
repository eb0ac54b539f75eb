"""Sparse-in-time optimal control of semilinear parabolic equations."""
from .kernels import BACKEND

__version__ = "0.1.0"
