"""Numba switch.

Set ``MGMICRO_DISABLE_NUMBA=1`` to force the pure-numpy kernels.  When numba
is missing the numpy kernels are used as well.
"""
import os

_flag = os.environ.get("MGMICRO_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _flag not in ("", "0", "false", "no")

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    _njit = None

USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV


def njit(*args, **kwargs):
    """``numba.njit`` with caching; identity decorator when numba is absent."""
    kwargs.setdefault("cache", True)
    if not HAVE_NUMBA:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return _njit(*args, **kwargs)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
