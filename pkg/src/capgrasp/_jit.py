"""Numba switch for the geometric kernels.

Set ``CAPGRASP_NUMBA=0`` to run every kernel through its pure-numpy path.
The flag is read once at import time.
"""
from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

USE_NUMBA = numba is not None and os.environ.get("CAPGRASP_NUMBA", "1").lower() not in (
    "0",
    "false",
    "no",
    "off",
)


def njit(func=None, **kwargs):
    """``numba.njit(cache=True, nogil=True)`` or a no-op, depending on the flag.

    The undecorated function stays reachable as ``.py_func`` in both modes so
    benchmarks and tests can exercise the interpreted path side by side.
    """

    def wrap(f):
        if not USE_NUMBA:
            f.py_func = f
            return f
        opts = {"cache": True, "nogil": True}
        opts.update(kwargs)
        return numba.njit(**opts)(f)

    if func is None:
        return wrap
    return wrap(func)
