"""Optional numba acceleration.

Set ``LIVEMAP_NO_NUMBA=1`` to force the pure-numpy code paths. Kernels that
have a numba variant register both implementations with :func:`dispatch`; the
flag is read once at import time.
"""
import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional speedup
    numba = None

USE_NUMBA = numba is not None and os.environ.get("LIVEMAP_NO_NUMBA", "") not in ("1", "true", "yes")


def njit(func):
    """Compile ``func`` in nopython mode when numba is usable, else return it unchanged."""
    if numba is None:
        return func
    return numba.njit(cache=True)(func)


def dispatch(fast, slow):
    """Pick the numba kernel or the numpy fallback according to ``USE_NUMBA``."""
    return fast if USE_NUMBA else slow
