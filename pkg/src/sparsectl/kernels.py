"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it was built; otherwise
(or when ``SPARSECTL_KERNELS=python`` is set) the numpy/scipy
implementation in ``_pykernels`` is used.  Both expose the same functions.
"""
import os

from . import _pykernels

python = _pykernels
compiled = None
try:
    from . import _ckernels as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and os.environ.get("SPARSECTL_KERNELS", "").lower() != "python":
    backend = compiled
    BACKEND = "cython"
else:
    backend = _pykernels
    BACKEND = "python"

OK, NEWTON_FAIL, BLOWUP, SINGULAR = 0, 1, 2, 3


def available():
    """Names of the importable backends."""
    return ["python"] + (["cython"] if compiled is not None else [])


def get(name=None):
    if name is None:
        return backend
    if name == "python":
        return _pykernels
    if name == "cython":
        if compiled is None:
            raise ImportError("compiled kernels are not built")
        return compiled
    raise ValueError(f"unknown kernel backend {name!r}")
