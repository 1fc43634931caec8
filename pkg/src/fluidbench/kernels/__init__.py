"""Hot numerical kernels with a compiled backend and a numpy fallback.

The compiled module is used when it has been built (``pip install -e .``
compiles it) unless the environment variable ``FLUIDBENCH_PURE_PYTHON``
is set to a non-empty value other than ``0``.
"""
import os

from . import _py

_force_python = os.environ.get("FLUIDBENCH_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_python:
        raise ImportError("pure python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _py
    BACKEND = "python"

dot_rows = _impl.dot_rows
sq_dists = _impl.sq_dists
add_row = _impl.add_row
positive_rank_sum = _impl.positive_rank_sum
f1_sweep = _impl.f1_sweep

__all__ = ["BACKEND", "dot_rows", "sq_dists", "add_row", "positive_rank_sum", "f1_sweep"]
