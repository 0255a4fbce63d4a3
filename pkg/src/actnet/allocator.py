"""Keep freed autodiff buffers in the process heap between training steps.

Every step allocates and frees the same set of mid-sized arrays. By
default glibc hands those back to the kernel on free, so every step pays
page faults again. Raising the trim threshold and top pad keeps them in
the heap. (Pinning the mmap threshold measured slower, so glibc's dynamic
threshold is left alone.)
"""

from __future__ import annotations

import ctypes
import ctypes.util
import sys

_M_TRIM_THRESHOLD = -1
_M_TOP_PAD = -2

_done = False


def keep_heap(threshold: int = 1 << 30) -> bool:
    """Apply once per process; returns False where glibc mallopt is unavailable."""
    global _done
    if _done:
        return True
    if not sys.platform.startswith("linux"):
        return False
    name = ctypes.util.find_library("c")
    if name is None:
        return False
    try:
        libc = ctypes.CDLL(name)
        mallopt = libc.mallopt
    except (OSError, AttributeError):
        return False
    ok = mallopt(_M_TRIM_THRESHOLD, threshold) == 1
    ok &= mallopt(_M_TOP_PAD, 128 << 20) == 1
    _done = ok
    return ok
