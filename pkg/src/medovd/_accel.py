"""Backend selection for the numeric kernels.

Every hot kernel exists twice: a numba ``@njit`` loop and a vectorised numpy
version. The numba path is used when numba imports cleanly and the
``MEDOVD_DISABLE_NUMBA`` environment variable is unset (or ``0``/``false``).
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _flag_disabled() -> bool:
    value = os.environ.get("MEDOVD_DISABLE_NUMBA", "").strip().lower()
    return value not in ("", "0", "false", "no")


NUMBA_AVAILABLE = numba is not None
USE_NUMBA = NUMBA_AVAILABLE and not _flag_disabled()


if NUMBA_AVAILABLE:
    njit = numba.njit(cache=True, nogil=True)
else:  # pragma: no cover
    def njit(fn):
        return fn


def select(numba_impl, numpy_impl):
    """Return the implementation matching the active backend."""
    return numba_impl if USE_NUMBA else numpy_impl


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
