"""Optional thread fan-out, capped by the RCPS_THREADS environment variable."""

import os
from concurrent.futures import ThreadPoolExecutor


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("RCPS_THREADS", "1")))
    except ValueError:
        return 1


def thread_map(fn, items):
    """Map preserving input order; sequential unless RCPS_THREADS > 1.

    Each item must carry everything its task needs (e.g. a derived seed), so
    results do not depend on scheduling.
    """
    items = list(items)
    workers = thread_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
