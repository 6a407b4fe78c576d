"""Dynamic Gaussian splatting with HexPlane deformation, colour disentanglement,
multiscale training and one-pass refinement, on CPU."""
import os

import numba

# TBB is rarely available; prefer OpenMP then the built-in workqueue
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

THREADS_ENV = "GS4D_THREADS"


def set_threads(n: int | None = None) -> int:
    """Cap renderer worker threads; ``None`` reads ``GS4D_THREADS``. Returns the active count."""
    if n is None:
        env = os.environ.get(THREADS_ENV)
        if not env:
            return numba.get_num_threads()
        try:
            n = int(env)
        except ValueError as exc:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


set_threads()

__version__ = "0.1.0"
