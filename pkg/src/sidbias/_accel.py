"""Numba switch for the hot kernels.

Kernels are written as plain numpy-on-arrays functions and decorated with
:func:`njit`.  Setting ``SIDBIAS_DISABLE_NUMBA=1`` (or having numba missing)
leaves them as ordinary Python so the same source runs as the reference path.
"""
import os

_disabled = os.environ.get("SIDBIAS_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

USE_NUMBA = _numba is not None and not _disabled


def njit(*args, **kwargs):
    """``numba.njit`` when enabled, identity decorator otherwise."""
    if USE_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
