"""Selective-scan kernels: compiled when available, numpy otherwise.

Set ``CRACKMAMBA_PURE_PYTHON=1`` before import to force the numpy path.
"""
import os

from . import _scan_py as python_backend

compiled_backend = None
if not os.environ.get("CRACKMAMBA_PURE_PYTHON"):
    try:
        from . import _scan_ext as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

if compiled_backend is not None:
    BACKEND = "cython"
    scan_forward = compiled_backend.scan_forward
    scan_backward = compiled_backend.scan_backward
else:
    BACKEND = "python"
    scan_forward = python_backend.scan_forward
    scan_backward = python_backend.scan_backward

__all__ = ["BACKEND", "compiled_backend", "python_backend", "scan_backward", "scan_forward"]
