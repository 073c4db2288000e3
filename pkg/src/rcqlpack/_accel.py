"""Backend switch for the hot geometry kernels.

Set ``RCQLPACK_DISABLE_NUMBA=1`` to force the pure-numpy code path. When numba
is not importable the numpy path is used regardless of the flag.
"""
from __future__ import annotations

import os

_FALSY = {"", "0", "false", "no", "off"}

NUMBA_REQUESTED = os.environ.get("RCQLPACK_DISABLE_NUMBA", "0").strip().lower() in _FALSY

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = NUMBA_REQUESTED and HAVE_NUMBA


def jit(fn):
    """Compile ``fn`` with ``numba.njit`` (cached); identity if numba is missing."""
    if not HAVE_NUMBA:
        return fn
    import numba

    return numba.njit(cache=True, nogil=True)(fn)


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
