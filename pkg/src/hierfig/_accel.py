"""JIT switch.

Set ``HIERFIG_DISABLE_JIT=1`` to run every kernel through its pure-numpy
path (useful for debugging and for checking the two paths against each
other). When numba is not importable the numpy path is used silently.
"""

import os

_FLAG = os.environ.get("HIERFIG_DISABLE_JIT", "").strip().lower()
JIT_REQUESTED = _FLAG not in ("1", "true", "yes", "on")

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is an optional extra
    _numba = None

NUMBA_AVAILABLE = _numba is not None
JIT_ENABLED = JIT_REQUESTED and NUMBA_AVAILABLE


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise.

    The kernels module always compiles through this so that the jitted and
    numpy variants can coexist in one process regardless of the flag.
    """
    if NUMBA_AVAILABLE:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap
