"""Numba switch.

Hot kernels are written twice: once as an ``@njit`` loop and once as plain
numpy. Set ``PRISMSURV_DISABLE_NUMBA=1`` to force the numpy path (useful for
debugging and for machines without numba).
"""

import os

_flag = os.environ.get("PRISMSURV_DISABLE_NUMBA", "").strip().lower()
DISABLED_BY_ENV = _flag in ("1", "true", "yes", "on")

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not DISABLED_BY_ENV


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise.

    Kernels are always compiled when numba exists (so the parity tests can call
    both paths); ``USE_NUMBA`` only controls which one the dispatchers pick.
    """
    kwargs.setdefault("cache", True)
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda f: f


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
