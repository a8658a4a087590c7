"""Worker-count control.  Results never depend on the thread count; only speed does."""

from __future__ import annotations

import os
import warnings

import numba


def thread_cap() -> int | None:
    raw = os.environ.get("TRAPFLOW_THREADS")
    if not raw:
        return None
    n = int(raw)
    if n < 1:
        raise ValueError("TRAPFLOW_THREADS must be a positive integer")
    return n


def apply_thread_cap() -> int:
    """Honour ``TRAPFLOW_THREADS`` (clipped to numba's pool size); return the active count."""
    n = thread_cap()
    with warnings.catch_warnings():
        # an old system TBB only triggers a fallback notice; the workqueue/omp layers are used
        warnings.simplefilter("ignore", numba.NumbaWarning)
        if n is not None:
            numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
        return numba.get_num_threads()
