"""Worker-count policy shared by the parallel loops."""
from __future__ import annotations

import os
from typing import Optional

__all__ = ["worker_count"]


def worker_count(explicit: Optional[int] = None) -> int:
    """Threads to use: ``explicit`` if given, else ``MARKETRON_THREADS``, else ``min(4, cpus)``."""
    if explicit is not None:
        return max(1, int(explicit))
    env = os.environ.get("MARKETRON_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError("MARKETRON_THREADS must be an integer") from None
    return min(4, os.cpu_count() or 1)
