"""Best-effort glibc allocator tuning for the training loop.

Each training pass allocates dozens of ~25-75 kB arrays; with default malloc
settings the heap is trimmed between passes and every allocation faults in
fresh pages, which dominates the runtime.  Raising the trim/mmap thresholds
keeps freed blocks hot and cuts the per-pass cost roughly in half.  On
platforms without glibc this is a silent no-op.
"""

from __future__ import annotations

import ctypes

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_M_MMAP_MAX = -4

_done = False


def tune_allocator() -> bool:
    global _done
    if _done:
        return True
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.mallopt(_M_MMAP_THRESHOLD, 1 << 24)
        libc.mallopt(_M_TRIM_THRESHOLD, 1 << 24)
        libc.mallopt(_M_MMAP_MAX, 0)
        _done = True
    except OSError:
        return False
    return True
