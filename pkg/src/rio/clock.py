"""Monotonic nanosecond clock shared by every node and transport.

All timestamps in the framework come from this single process-wide clock;
wall-clock time is never used for sample or request timestamps. Processes on
the same machine share the kernel monotonic clock, so cross-process offsets
are zero here; networked peers exchange clock readings at connection time and
apply the measured offset (see middleware.tcp).
"""

from __future__ import annotations

import time


def now_ns() -> int:
    """Current monotonic time in integer nanoseconds."""
    return time.monotonic_ns()


def sleep_until_ns(deadline_ns: int) -> None:
    """Sleep until the monotonic clock reaches ``deadline_ns`` (no-op if past)."""
    remaining = deadline_ns - time.monotonic_ns()
    if remaining > 0:
        time.sleep(remaining / 1e9)


class RateKeeper:
    """Absolute-deadline scheduler for fixed-rate loops.

    Keeps ``next_deadline += period`` instead of sleeping a fixed period after
    each tick, so per-tick jitter does not accumulate into rate drift. If the
    loop overruns by more than one period the schedule is re-anchored to now,
    trading a burst of catch-up ticks for a bounded backlog.
    """

    def __init__(self, rate_hz: float):
        if rate_hz <= 0:
            raise ValueError(f"rate_hz must be positive, got {rate_hz}")
        self.period_ns = int(round(1e9 / rate_hz))
        self._deadline = now_ns() + self.period_ns

    def wait(self) -> int:
        """Block until the next tick deadline; returns the tick timestamp."""
        sleep_until_ns(self._deadline)
        tick = now_ns()
        self._deadline += self.period_ns
        if tick - self._deadline > self.period_ns:
            self._deadline = tick + self.period_ns
        return tick
