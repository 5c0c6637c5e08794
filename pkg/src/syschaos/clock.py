"""Time sources. Collection loops and the orchestrator only see these."""

from __future__ import annotations

import threading
import time
from typing import Callable, Protocol


class Clock(Protocol):
    def now(self) -> float: ...

    def sleep(self, seconds: float) -> None: ...


class SystemClock:
    def now(self) -> float:
        return time.time()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock:
    """Clock that advances only when slept on; listeners run after each advance."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()
        self._listeners: list[Callable[[float], None]] = []

    def now(self) -> float:
        return self._now

    def sleep(self, seconds: float) -> None:
        if seconds <= 0:
            return
        with self._lock:
            self._now += seconds
            now = self._now
        for fn in list(self._listeners):
            fn(now)

    def on_advance(self, fn: Callable[[float], None]) -> None:
        self._listeners.append(fn)


def sleep_until(
    clock: Clock,
    deadline: float,
    interrupt: Callable[[], bool] | None = None,
    slice_seconds: float = 0.1,
) -> bool:
    """Sleep until ``deadline``; return False early if ``interrupt()`` turns true."""
    while True:
        remaining = deadline - clock.now()
        if remaining <= 0:
            return True
        clock.sleep(min(remaining, slice_seconds) if interrupt else remaining)
        if interrupt is not None and interrupt():
            return False
