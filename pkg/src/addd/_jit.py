"""Optional numba compilation for the hot numeric kernels."""

import os

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

DISABLED = numba is None or os.environ.get("ADDD_DISABLE_JIT") == "1"


def jit(fn):
    if DISABLED:
        return fn
    return numba.njit(cache=True)(fn)
