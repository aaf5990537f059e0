"""Backend selection for the compiled kernels.

Set ``SVDCLIP_DISABLE_NUMBA=1`` (or ``SVDCLIP_BACKEND=numpy``) before import
to force the pure-numpy path. Missing numba also falls back silently.
"""

import os

_FALSY = {"", "0", "false", "no", "off"}


def _requested_numpy() -> bool:
    if os.environ.get("SVDCLIP_DISABLE_NUMBA", "").strip().lower() not in _FALSY:
        return True
    return os.environ.get("SVDCLIP_BACKEND", "").strip().lower() == "numpy"


try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None

HAVE_NUMBA = _numba is not None
USE_NUMBA = HAVE_NUMBA and not _requested_numpy()
BACKEND = "numba" if USE_NUMBA else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is importable, identity otherwise.

    Kernels are always compiled when numba exists, so the benchmark can time
    them even if the dispatcher was told to use numpy.
    """
    if not HAVE_NUMBA:
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda f: f
    kwargs.setdefault("cache", True)
    return _numba.njit(*args, **kwargs)
