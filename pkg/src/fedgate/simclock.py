"""Virtual-time event loop for deterministic simulation.

The whole service is ordinary asyncio code that reads time from
``loop.time()`` and waits with ``asyncio.sleep``. Run it on
:class:`VirtualTimeEventLoop` and every timer fires in virtual time: whenever
no callback is ready, the clock jumps straight to the next scheduled deadline
instead of sleeping. Hours of simulated traffic execute in milliseconds and
two runs of the same scenario produce identical event orderings.

Run it on the standard loop (``asyncio.run``) and the same code serves real
traffic in wall-clock time.
"""

from __future__ import annotations

import asyncio
import heapq
from typing import Any, Coroutine, TypeVar

T = TypeVar("T")


class VirtualTimeEventLoop(asyncio.SelectorEventLoop):
    """Selector event loop whose clock advances only via scheduled timers.

    ``time()`` returns the virtual clock, which starts at 0.0. Real I/O still
    works (the selector is polled with a zero timeout), but a task blocked
    solely on external I/O with no pending timers will block the loop, so
    virtual runs should keep all traffic in-process.
    """

    def __init__(self) -> None:
        super().__init__()
        self._vt_now = 0.0

    def time(self) -> float:
        return self._vt_now

    def advance(self, seconds: float) -> None:
        """Manually push the clock forward (rarely needed; timers do this)."""
        if seconds < 0:
            raise ValueError("cannot move virtual time backwards")
        self._vt_now += seconds

    def _run_once(self) -> None:
        # Drop cancelled timers so the jump target is a live deadline.
        while self._scheduled and self._scheduled[0]._cancelled:
            handle = heapq.heappop(self._scheduled)
            handle._scheduled = False
        if not self._ready and self._scheduled:
            when = self._scheduled[0]._when
            if when > self._vt_now:
                self._vt_now = when
        super()._run_once()


def run_virtual(coro: Coroutine[Any, Any, T]) -> T:
    """Run ``coro`` to completion on a fresh virtual-time loop."""
    loop = VirtualTimeEventLoop()
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(coro)
    finally:
        try:
            _cancel_leftovers(loop)
        finally:
            asyncio.set_event_loop(None)
            loop.close()


def _cancel_leftovers(loop: asyncio.AbstractEventLoop) -> None:
    pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
    for task in pending:
        task.cancel()
    if pending:
        loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))


def now() -> float:
    """Current time on the running loop (virtual or wall)."""
    return asyncio.get_running_loop().time()
