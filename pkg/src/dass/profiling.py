"""Peak host-memory measurement from allocator events."""
from __future__ import annotations

import contextlib
import logging
import os
import sys

from torch.profiler import profile

log = logging.getLogger(__name__)


class PeakMemory:
    peak: int | None = None


def peak_from_events(events) -> int:
    """Largest running sum of allocation deltas, in time order."""
    cum = peak = 0
    for ev in sorted(events, key=lambda e: e.time_range.start):
        cum += ev.self_cpu_memory_usage
        peak = max(peak, cum)
    return peak


@contextlib.contextmanager
def _quiet_stdout():
    # the profiler backend can print probe warnings on the raw fd
    try:
        fd = sys.stdout.fileno()
    except (AttributeError, ValueError, OSError):
        yield
        return
    sys.stdout.flush()
    saved = os.dup(fd)
    with open(os.devnull, "w") as null:
        os.dup2(null.fileno(), fd)
        try:
            yield
        finally:
            os.dup2(saved, fd)
            os.close(saved)


@contextlib.contextmanager
def peak_memory():
    """Measure the peak bytes allocated by torch ops run inside the block."""
    result = PeakMemory()
    with _quiet_stdout():
        with profile(profile_memory=True) as prof:
            yield result
    result.peak = peak_from_events(prof.events())
    log.debug("peak memory %d bytes", result.peak)
