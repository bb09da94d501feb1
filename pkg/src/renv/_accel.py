"""Switch between numba-compiled kernels and the pure-numpy fallback.

Setting the environment variable ``RENV_NO_NUMBA`` to anything other than
``""`` or ``"0"`` forces the numpy path, which is also used automatically
when numba cannot be imported.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_DISABLED = os.environ.get("RENV_NO_NUMBA", "") not in ("", "0")
HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and not NUMBA_DISABLED

jit_options = {"nogil": True, "cache": True, "fastmath": False}


def njit(func):
    """Compile ``func`` with numba when available, else return it unchanged."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(**jit_options)(func)


def pick(compiled, fallback):
    """Return the compiled kernel unless the numpy path is selected."""
    return compiled if USE_NUMBA else fallback
