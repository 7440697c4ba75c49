"""Backend switch for the hot kernels.

Set ``SIMDT_NO_NUMBA=1`` to force the pure-numpy path (also used automatically
when numba cannot be imported).
"""
import os

_DISABLED = os.environ.get("SIMDT_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def njit(fn):
    """``numba.njit(cache=True)`` when numba is importable, identity otherwise."""
    if numba is None:
        return fn
    return numba.njit(cache=True)(fn)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
