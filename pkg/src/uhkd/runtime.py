"""Process-level tuning for the numpy-heavy training loop."""

from __future__ import annotations

import ctypes
import ctypes.util

_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3
_done = False


def tune_allocator(mmap_threshold: int = 64 << 20, trim_threshold: int = 128 << 20) -> bool:
    """Keep large temporaries on the glibc heap instead of fresh mmap pages.

    Training allocates many short-lived arrays of a few hundred KB; with the
    default thresholds each one is page-faulted in anew, which roughly
    triples the cost of elementwise kernels. Returns False where mallopt is
    unavailable (non-glibc platforms); results are unaffected either way.
    """
    global _done
    if _done:
        return True
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    mallopt.argtypes = (ctypes.c_int, ctypes.c_int)
    ok = bool(mallopt(_M_MMAP_THRESHOLD, mmap_threshold)) and bool(mallopt(_M_TRIM_THRESHOLD, trim_threshold))
    _done = ok
    return ok
