"""Deterministic chunked execution with optional thread parallelism.

The environment variable ``EDFFD_THREADS`` caps the worker count
(0 or unset means one worker per CPU). Work is split into fixed-size
index chunks regardless of the worker count, and workers write into
disjoint output slices, so threaded and serial runs are bitwise
identical.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

# Pixels per chunk for basis-matrix evaluation; fixed so that results do
# not depend on the thread count.
CHUNK = 16384


def worker_count() -> int:
    raw = os.environ.get("EDFFD_THREADS", "")
    try:
        value = int(raw) if raw else 0
    except ValueError:
        value = 0
    if value <= 0:
        value = os.cpu_count() or 1
    return value


def run_chunked(total: int, fn, chunk: int = CHUNK) -> None:
    """Call ``fn(start, stop)`` over consecutive slices of ``range(total)``.

    ``fn`` must write its results into preallocated arrays. Slices are
    disjoint, so execution order does not affect the output.
    """
    if total <= 0:
        return
    spans = [(s, min(s + chunk, total)) for s in range(0, total, chunk)]
    workers = min(worker_count(), len(spans))
    if workers <= 1:
        for start, stop in spans:
            fn(start, stop)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # list() consumes the iterator so worker exceptions propagate.
        list(pool.map(lambda span: fn(*span), spans))
