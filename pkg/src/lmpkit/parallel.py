"""Order-preserving map over independent items, capped by ``LMPKIT_THREADS``."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    raw = os.environ.get("LMPKIT_THREADS", "").strip()
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def ordered_map(fn, items) -> list:
    """``[fn(x) for x in items]``, fanned out over threads when more than one is allowed.

    Results keep input order, so any later reduction is order-fixed.
    """
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
