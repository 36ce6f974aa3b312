"""Virtual clock for deterministic simulation.

Time never tracks the wall; it advances only at quiescence, when every
registered participant is blocked on a deadline that is still in the
future. At that moment the clock jumps to the earliest pending deadline
and releases the sleepers due at it. Worker pools register each worker
for its lifetime, so a wave of concurrent 10 ms sleeps costs 10 ms of
virtual time while the same sleeps issued sequentially cost their sum.
A bare ``sleep`` from an unregistered thread registers itself for the
duration of the call and therefore completes immediately.
"""

from __future__ import annotations

import heapq
import threading
from datetime import datetime, timezone


class ClockStalled(RuntimeError):
    """No advance happened for too long; a participant is wedged."""


class VirtualClock:
    # Real-seconds guard against bugs that would otherwise hang tests.
    STALL_TIMEOUT = 10.0

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._cond = threading.Condition()
        self._participants = 0
        # Sleepers whose deadline lies in the future. Threads that are due
        # but not yet rescheduled count as runnable, not as sleeping.
        self._pending = 0
        self._deadlines: list[tuple[float, int, list[bool]]] = []
        self._seq = 0
        self._local = threading.local()

    def now(self) -> float:
        with self._cond:
            return self._now

    def now_datetime(self) -> datetime:
        return datetime.fromtimestamp(self.now(), tz=timezone.utc)

    def now_iso(self) -> str:
        return self.now_datetime().isoformat()

    def register(self) -> None:
        """Enter the quiescence set; pair with :meth:`deregister`."""
        depth = getattr(self._local, "depth", 0)
        self._local.depth = depth + 1
        with self._cond:
            self._participants += 1

    def preregister(self, count: int) -> None:
        """Count ``count`` future participants before their threads start.

        Prevents a premature advance while a worker pool is still spinning
        up. Each worker calls :meth:`adopt` on entry and :meth:`deregister`
        on exit as usual.
        """
        with self._cond:
            self._participants += count

    def adopt(self) -> None:
        """Mark this thread as covered by an earlier :meth:`preregister`."""
        self._local.depth = getattr(self._local, "depth", 0) + 1

    def deregister(self) -> None:
        self._local.depth = max(0, getattr(self._local, "depth", 1) - 1)
        with self._cond:
            self._participants -= 1
            self._maybe_advance()

    def sleep(self, seconds: float) -> None:
        """Block until virtual time has advanced by ``seconds``."""
        if seconds <= 0:
            return
        auto = getattr(self._local, "depth", 0) == 0
        if auto:
            self.register()
        try:
            with self._cond:
                self._seq += 1
                deadline = self._now + seconds
                pending_flag = [True]
                heapq.heappush(self._deadlines, (deadline, self._seq, pending_flag))
                self._pending += 1
                try:
                    self._maybe_advance()
                    while self._now < deadline:
                        if not self._cond.wait(timeout=self.STALL_TIMEOUT):
                            raise ClockStalled(
                                f"virtual clock made no progress for "
                                f"{self.STALL_TIMEOUT}s (participants="
                                f"{self._participants}, pending={self._pending})"
                            )
                finally:
                    if pending_flag[0]:
                        # Abnormal exit before the deadline was reached.
                        pending_flag[0] = False
                        self._pending -= 1
        finally:
            if auto:
                self.deregister()

    def _maybe_advance(self) -> None:
        # Caller holds the condition.
        if (
            self._participants > 0
            and self._pending >= self._participants
            and self._deadlines
        ):
            new_now = self._deadlines[0][0]
            if new_now > self._now:
                self._now = new_now
            while self._deadlines and self._deadlines[0][0] <= self._now:
                _, _, flag = heapq.heappop(self._deadlines)
                if flag[0]:
                    flag[0] = False
                    self._pending -= 1
        self._cond.notify_all()
