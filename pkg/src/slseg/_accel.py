"""Numba switch.

Set ``SLSEG_NUMBA=0`` before import to force the pure-numpy kernels.
"""
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SLSEG_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, otherwise identity."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True)(fn)
