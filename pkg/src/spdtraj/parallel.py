"""Thread-pool helper honoring the SPDTRAJ_THREADS environment variable.

Pairwise kernel fills are embarrassingly parallel; results are assembled
in input order, so the worker count never changes the output.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from .errors import ValidationError

_ENV_VAR = "SPDTRAJ_THREADS"


def max_workers() -> int:
    """Worker cap from the environment; defaults to 1 (serial)."""
    raw = os.environ.get(_ENV_VAR)
    if raw is None or raw.strip() == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"{_ENV_VAR} must be a positive integer, got {raw!r}")
    if n < 1:
        raise ValidationError(f"{_ENV_VAR} must be a positive integer, got {raw!r}")
    return n


def thread_map(fn, items):
    """Map ``fn`` over ``items``, threaded when SPDTRAJ_THREADS > 1.

    Returns results in input order either way.
    """
    items = list(items)
    workers = max_workers()
    if workers == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
