"""Numba switch.

Set ``DSSEP_DISABLE_NUMBA=1`` to force the pure-numpy kernels (useful for
debugging, profiling the fallback, or platforms without llvmlite).
"""

import os

_FLAG = os.environ.get("DSSEP_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("1", "true", "yes", "on")


def njit(func):
    """Compile ``func`` in nopython mode when numba is usable, else return None."""
    if not NUMBA_AVAILABLE:
        return None
    return numba.njit(cache=True, fastmath=False)(func)
