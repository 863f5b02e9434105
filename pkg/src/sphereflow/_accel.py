"""Backend switch for the hot kernels.

``SPHEREFLOW_BACKEND=numpy`` forces the pure-numpy kernels; anything else
(default ``numba``) uses the jit-compiled ones when numba imports cleanly.
"""
import os

# skip the TBB probe (warns on older system TBB); omp is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba = None

BACKEND_ENV = "SPHEREFLOW_BACKEND"


def requested_backend():
    name = os.environ.get(BACKEND_ENV, "numba").strip().lower()
    if name not in ("numba", "numpy"):
        name = "numba"
    if name == "numba" and numba is None:
        return "numpy"
    return name


def set_threads(n):
    """Cap numba worker threads; ``None`` leaves the numba default."""
    if numba is None or n is None:
        return
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
