"""Numerical backend selection.

The compiled Cython kernels are used when importable; otherwise the NumPy
fallback takes over.  Set MENKF_BACKEND=python to force the fallback, or
MENKF_BACKEND=cython to insist on the compiled module (raising if absent).
"""
from __future__ import annotations

import os

from . import kernels_py

_requested = os.environ.get("MENKF_BACKEND", "").strip().lower()
if _requested not in ("", "cython", "python"):
    raise ImportError(
        f"MENKF_BACKEND must be 'cython' or 'python', got {_requested!r}"
    )

_compiled = None
if _requested in ("", "cython"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "MENKF_BACKEND=cython requested but the compiled kernels "
                "could not be imported; rebuild the extension or unset the "
                "variable"
            ) from None

kernels = _compiled if _compiled is not None else kernels_py
BACKEND = kernels.BACKEND_NAME


def available_backends() -> dict:
    """Map of importable backend name -> kernel module."""
    out = {"python": kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    return out
