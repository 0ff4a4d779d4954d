"""Small shared helpers."""

from __future__ import annotations

import os

WORKERS_ENV = "JOBVS_NUM_WORKERS"


def num_workers(requested: int | None = None) -> int:
    """Worker cap for prefetch / per-subject parallelism.

    0 means fully serial (the deterministic reference mode). The JOBVS_NUM_WORKERS
    environment variable caps whatever the caller requested.
    """
    cap = os.environ.get(WORKERS_ENV)
    cap_n = int(cap) if cap not in (None, "") else 0
    if requested is None:
        return max(0, cap_n)
    return max(0, min(requested, cap_n)) if cap_n else 0
