"""Virtual-clock event loop.

Time is integer nanoseconds. Events scheduled for the same instant run in
insertion order, which makes every run a pure function of its inputs.
"""

from __future__ import annotations

import hashlib
import heapq
from itertools import count
from typing import Any, Callable

MS = 1_000_000
US = 1_000
SEC = 1_000_000_000


class Scheduler:
    def __init__(self, keep_trace: bool = False):
        self.now = 0
        self._queue: list[tuple[int, int, Callable, tuple]] = []
        self._seq = count()
        self._digest = hashlib.sha256()
        self.keep_trace = keep_trace
        self.trace: list[tuple] = []
        self.events_run = 0

    def at(self, time: int, fn: Callable, *args: Any) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule at {time} < now {self.now}")
        heapq.heappush(self._queue, (time, next(self._seq), fn, args))

    def after(self, delay: int, fn: Callable, *args: Any) -> None:
        self.at(self.now + delay, fn, *args)

    def record(self, kind: str, *fields: Any) -> None:
        """Append one record to the event trace."""
        rec = (self.now, kind) + fields
        self._digest.update(repr(rec).encode())
        self._digest.update(b"\n")
        if self.keep_trace:
            self.trace.append(rec)

    def digest(self) -> str:
        return self._digest.hexdigest()

    def run(self, until: int | None = None) -> None:
        q = self._queue
        while q:
            if until is not None and q[0][0] > until:
                break
            time, _, fn, args = heapq.heappop(q)
            self.now = time
            self.events_run += 1
            fn(*args)
        if until is not None and self.now < until:
            self.now = until

    def pending(self) -> int:
        return len(self._queue)
