"""Numba switch for the hot kernels.

Set ``TOOTHSEG_USE_NUMBA=0`` to force the vectorized numpy fallbacks. The
flag is read once at import; :func:`use_numba` can flip it at runtime for
benchmarks and equivalence tests.
"""
from __future__ import annotations

import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

_USE_NUMBA = HAVE_NUMBA and os.environ.get("TOOTHSEG_USE_NUMBA", "1").lower() not in ("0", "false", "no")


def try_njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise."""
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    return numba.njit(*args, **kwargs)


def numba_enabled() -> bool:
    return _USE_NUMBA


def use_numba(flag: bool) -> bool:
    """Enable or disable the numba path; returns the previous setting."""
    global _USE_NUMBA
    prev = _USE_NUMBA
    _USE_NUMBA = bool(flag) and HAVE_NUMBA
    return prev
