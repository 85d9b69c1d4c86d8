"""Numba switch.

Set ``FLOCKCTL_DISABLE_NUMBA=1`` to run every hot kernel through its pure
numpy implementation. When numba is not importable the numpy path is used
regardless of the flag.
"""
import os

try:
    import numba
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

JIT_DISABLED = os.environ.get("FLOCKCTL_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes", "on")
USE_NUMBA = HAVE_NUMBA and not JIT_DISABLED


def njit(func=None, **kwargs):
    """``numba.njit`` when numba is available, identity otherwise.

    The numba-compiled kernels are always built when numba imports so the
    benchmark can compare both paths; ``USE_NUMBA`` only decides which one the
    public dispatchers call.
    """
    opts = {"cache": True, "nogil": True}
    opts.update(kwargs)
    if not HAVE_NUMBA:
        if func is not None:
            return func
        return lambda f: f
    if func is not None:
        return numba.njit(**opts)(func)
    return numba.njit(**opts)
