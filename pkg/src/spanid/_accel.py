"""Numba switch for the hot kernels.

Set ``SPANID_DISABLE_NUMBA=1`` (or ``true``/``yes``) before import to run the
kernels as plain Python/NumPy. The same source is used for both paths.
"""

import os

_FLAG = os.environ.get("SPANID_DISABLE_NUMBA", "").strip().lower()
NUMBA_DISABLED = _FLAG in ("1", "true", "yes", "on")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

USE_NUMBA = numba is not None and not NUMBA_DISABLED


def maybe_njit(fn):
    """Compile ``fn`` with ``numba.njit(cache=True)`` unless numba is disabled."""
    if USE_NUMBA:
        return numba.njit(cache=True, fastmath=False)(fn)
    return fn


def python_version(fn):
    """Return the uncompiled function behind ``fn`` (identity for plain functions)."""
    return getattr(fn, "py_func", fn)
