"""Numba switch.

Hot kernels are written twice: a loop version compiled with ``numba.njit``
and a vectorised numpy version. ``FD2CL_NUMBA=0`` forces the numpy path;
the numba path is also skipped when numba is not importable.
"""
import os

try:
    import numba
    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - depends on the environment
    numba = None
    NUMBA_AVAILABLE = False


def _flag(value):
    return value.strip().lower() not in ("0", "false", "no", "off", "")


USE_NUMBA = NUMBA_AVAILABLE and _flag(os.environ.get("FD2CL_NUMBA", "1"))

numba_default = {
    "nogil": True,
    "cache": True,
    "fastmath": False,
    "boundscheck": False,
}


def njit(func):
    """Compile ``func`` with numba when available; otherwise return it untouched.

    The uncompiled function is still a correct (slow) reference, so the
    numba-flavoured kernels stay callable on machines without numba.
    """
    if NUMBA_AVAILABLE:
        return numba.njit(**numba_default)(func)
    return func
