"""Numba toggle.

Hot loop kernels are compiled with numba when it is importable. Setting
``FEWCOUNT_DISABLE_NUMBA=1`` selects the vectorised numpy implementations
instead; both paths produce the same numbers up to float rounding.
"""

import os

_FLAG = "FEWCOUNT_DISABLE_NUMBA"


def _numba_requested() -> bool:
    return os.environ.get(_FLAG, "").strip().lower() not in ("1", "true", "yes", "on")


try:
    if not _numba_requested():
        raise ImportError("numba disabled by " + _FLAG)
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        # bare @njit and @njit(cache=True) both resolve to the identity
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"
