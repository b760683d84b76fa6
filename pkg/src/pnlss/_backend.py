"""Backend selection for the hot numeric kernels.

Set ``PNLSS_DISABLE_NUMBA=1`` to force the pure-numpy implementations.
"""
import os

_FLAG = os.environ.get("PNLSS_DISABLE_NUMBA", "").strip().lower()

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

HAS_NUMBA = numba is not None

USE_NUMBA = HAS_NUMBA and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` when available, otherwise an identity decorator."""
    if HAS_NUMBA:
        return numba.njit(*args, **kwargs)

    def wrap(func):
        return func
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
