"""Experiment clocks.

Everything that timestamps (journal, load generator, scheduler) reads one
clock. :class:`VirtualClock` is a discrete-event loop used with the simulated
backend: time jumps from event to event, so a ten minute experiment runs in
seconds and is exactly reproducible. :class:`WallClock` is real time.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Callable

SIM_EPOCH = 1_700_000_000.0


class Clock:
    virtual: bool = False

    def now(self) -> float:
        raise NotImplementedError

    def call_at(self, t: float, fn: Callable[[], None]) -> None:
        raise NotImplementedError

    def run_until(self, t: float) -> None:
        raise NotImplementedError


class VirtualClock(Clock):
    virtual = True

    def __init__(self, start: float = SIM_EPOCH):
        self._now = start
        self._queue: list = []
        self._seq = itertools.count()

    def now(self) -> float:
        return self._now

    def call_at(self, t: float, fn: Callable[[], None], priority: int = 0) -> None:
        """Schedule ``fn`` at virtual time ``t``.

        Ties are broken by ``priority`` then insertion order; callbacks in the
        past run at the current time.
        """
        heapq.heappush(self._queue, (max(t, self._now), priority, next(self._seq), fn))

    def run_until(self, t: float) -> None:
        q = self._queue
        while q and q[0][0] < t:
            when, _, _, fn = heapq.heappop(q)
            self._now = when
            fn()
        self._now = max(self._now, t)

    def advance(self, dt: float) -> None:
        self.run_until(self._now + dt)

    def pending(self) -> int:
        return len(self._queue)


class WallClock(Clock):
    """Real time; :meth:`run_until` fires timers in the calling thread."""

    def __init__(self):
        self._queue: list = []
        self._seq = itertools.count()
        self._lock = threading.Lock()
        self._wake = threading.Event()

    def now(self) -> float:
        return time.time()

    def call_at(self, t: float, fn: Callable[[], None], priority: int = 0) -> None:
        with self._lock:
            heapq.heappush(self._queue, (t, priority, next(self._seq), fn))
        self._wake.set()

    def run_until(self, t: float) -> None:
        while True:
            with self._lock:
                head = self._queue[0] if self._queue else None
                if head is not None and head[0] < t and head[0] <= self.now():
                    heapq.heappop(self._queue)
                    fn = head[3]
                else:
                    fn = None
            if fn is not None:
                fn()
                continue
            now = self.now()
            if now >= t and (head is None or head[0] >= t):
                return
            wake_at = t if head is None else min(t, head[0])
            self._wake.clear()
            self._wake.wait(max(0.0, wake_at - now))
