"""Numba shim.

Kernels are compiled with numba when it is importable and the environment
variable ``PANOROOM_DISABLE_NUMBA`` is unset (or ``0``).  Otherwise the
pure-numpy implementations in :mod:`panoroom.kernels` are used.
"""
import os

_flag = os.environ.get("PANOROOM_DISABLE_NUMBA", "").strip().lower()
_disabled = _flag not in ("", "0", "false", "no")

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    _njit = None

USE_NUMBA = HAVE_NUMBA and not _disabled


def njit(*args, **kw):
    """``numba.njit`` when available, otherwise a passthrough decorator."""
    if HAVE_NUMBA:
        return _njit(*args, **kw)
    if len(args) == 1 and callable(args[0]) and not kw:
        return args[0]
    return lambda f: f
