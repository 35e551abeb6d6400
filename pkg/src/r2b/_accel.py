"""Numba availability switch.

Set ``R2B_NO_NUMBA=1`` in the environment to force the pure-numpy kernels.
The choice is made once at import time.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

NUMBA_DISABLED = os.environ.get("R2B_NO_NUMBA", "0") not in ("", "0", "false", "False")
USE_NUMBA = numba is not None and not NUMBA_DISABLED


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise.

    The numba-compiled variants are always defined (so benchmarks can compare
    both paths); ``USE_NUMBA`` only decides which one the dispatchers call.
    """
    if numba is None:  # pragma: no cover
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return numba.njit(*args, **kwargs)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
