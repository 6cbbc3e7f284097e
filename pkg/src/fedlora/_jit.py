"""Optional numba acceleration.

Kernels are written as plain scalar loops and compiled with ``numba.njit``
when numba is importable.  Setting ``FEDLORA_DISABLE_JIT=1`` forces the
vectorised numpy fallbacks instead (useful for debugging and for the
benchmark in ``benchmarks/bench_kernels.py``).
"""

from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

HAVE_NUMBA = numba is not None
JIT_DISABLED = os.environ.get("FEDLORA_DISABLE_JIT", "0").lower() in ("1", "true", "yes")
USE_JIT = HAVE_NUMBA and not JIT_DISABLED


def njit(fn):
    """Compile ``fn`` with numba if available, else return it unchanged."""
    if not HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)
