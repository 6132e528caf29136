"""Numba switch.

Set ``VANISHCOST_DISABLE_NUMBA=1`` before import to force the pure
numpy/scipy code paths. The flag is read once.
"""

import os

_DISABLED = os.environ.get("VANISHCOST_DISABLE_NUMBA", "").strip().lower() in (
    "1",
    "true",
    "yes",
    "on",
)

try:
    if _DISABLED:
        raise ImportError
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:
    _numba = None
    HAVE_NUMBA = False


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    if HAVE_NUMBA:
        kwargs.setdefault("cache", True)
        kwargs.setdefault("nogil", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(fn):
        return fn

    return wrap


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
