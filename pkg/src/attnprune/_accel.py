"""Numba switch.

Set ``ATTNPRUNE_NUMBA=0`` before import to force the pure-numpy kernels.
"""
import os

USE_NUMBA = os.environ.get("ATTNPRUNE_NUMBA", "1").lower() not in ("0", "false", "no", "off")

if USE_NUMBA:
    try:
        import numba
    except ImportError:  # pragma: no cover
        USE_NUMBA = False


def njit(func):
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(func)
    return func
