"""Process-level knobs: kernel thread cap."""

from __future__ import annotations

import contextlib
import os
from typing import Optional

from threadpoolctl import threadpool_limits

THREADS_ENV = "BRANCHYCSI_THREADS"


def thread_cap(explicit: Optional[int] = None) -> Optional[int]:
    """Thread cap from the argument, else from ``BRANCHYCSI_THREADS``; None means uncapped."""
    if explicit is not None:
        return int(explicit)
    raw = os.environ.get(THREADS_ENV, "").strip()
    return int(raw) if raw else None


def limit_threads(n: Optional[int] = None):
    """Context manager capping BLAS/OpenMP pools at ``n`` threads (or the environment's cap)."""
    cap = thread_cap(n)
    if cap is None:
        return contextlib.nullcontext()
    if cap < 1:
        raise ValueError(f"thread cap must be >= 1, got {cap}")
    return threadpool_limits(limits=cap)
