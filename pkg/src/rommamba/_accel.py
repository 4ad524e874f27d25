"""Numba switch for the hot kernels.

Set ``ROMMAMBA_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
"""
import logging
import os

logger = logging.getLogger(__name__)

_FLAG = "ROMMAMBA_DISABLE_NUMBA"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get(_FLAG, "0").lower() not in ("1", "true", "yes")


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise.

    Compilation is cached on disk so repeated test runs skip the JIT warmup.
    """
    kwargs.setdefault("cache", True)

    def wrap(fn):
        if not HAVE_NUMBA:
            return fn
        return numba.njit(**kwargs)(fn)

    if len(args) == 1 and callable(args[0]):
        return wrap(args[0])
    return wrap


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
