"""Wall-clock and peak resident memory of a single call."""

from __future__ import annotations

import ctypes
import ctypes.util
import gc
import os
import threading
import time
from dataclasses import dataclass
from typing import Any, Callable

import psutil

MIB = 1024.0 * 1024.0


def _load_malloc_trim():
    name = ctypes.util.find_library("c")
    try:
        return getattr(ctypes.CDLL(name), "malloc_trim") if name else None
    except (OSError, AttributeError):
        return None


_MALLOC_TRIM = _load_malloc_trim()


def release_free_memory() -> None:
    """Collect garbage and hand free heap pages back to the OS (glibc only).

    Without this, a call can reuse pages freed earlier in the process, which
    are still resident, and its allocations never show up in RSS.
    """
    gc.collect()
    if _MALLOC_TRIM is not None:
        _MALLOC_TRIM(0)


@dataclass(frozen=True)
class Profile:
    seconds: float
    peak_mib: float
    baseline_mib: float
    value: Any = None

    @property
    def extra_mib(self) -> float:
        """Peak minus the resident size just before the call."""
        return max(self.peak_mib - self.baseline_mib, 0.0)


def profile(run: Callable[[], Any], interval: float = 0.005) -> Profile:
    """Time ``run()`` and sample this process's RSS from a helper thread.

    The peak is the largest RSS seen before, during or right after the call,
    so short allocations between samples may be missed by at most one interval.
    """
    proc = psutil.Process(os.getpid())
    release_free_memory()
    base = proc.memory_info().rss
    peak = [base]
    stop = threading.Event()

    def sampler():
        while not stop.is_set():
            rss = proc.memory_info().rss
            if rss > peak[0]:
                peak[0] = rss
            stop.wait(interval)

    th = threading.Thread(target=sampler, daemon=True)
    th.start()
    t0 = time.perf_counter()
    try:
        value = run()
        # one last sample while the result is still alive
        peak[0] = max(peak[0], proc.memory_info().rss)
    finally:
        seconds = time.perf_counter() - t0
        stop.set()
        th.join()
    return Profile(seconds, peak[0] / MIB, base / MIB, value)
