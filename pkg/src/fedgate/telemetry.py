"""Request logging, usage accounting, and metrics aggregation.

Usage records flow through a bounded channel into a single writer task that
appends JSON lines and flushes on a timer, so producers never block on disk.
When the channel is full the store drops to lossy mode and counts what it
dropped instead of stalling the gateway. A rolling in-memory window serves
the /metrics snapshot; lifetime token totals are exact.
"""

from __future__ import annotations

import asyncio
import json
import os
from collections import deque
from dataclasses import asdict, dataclass
from typing import Iterable

from .simclock import now


@dataclass
class UsageRecord:
    task_id: str
    subject: str
    model: str
    endpoint: str
    kind: str
    prompt_tokens: int
    completion_tokens: int
    arrived_at: float
    dispatched_at: float
    completed_at: float
    outcome: str  # "ok" or an error code like "502"

    @property
    def latency_s(self) -> float:
        return self.completed_at - self.arrived_at

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens


def quantile(sorted_values: list[float], q: float) -> float:
    """Linear interpolation between closest ranks; 0 for empty input."""
    if not sorted_values:
        return 0.0
    if len(sorted_values) == 1:
        return sorted_values[0]
    pos = (len(sorted_values) - 1) * q
    lo = int(pos)
    hi = min(lo + 1, len(sorted_values) - 1)
    frac = pos - lo
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * frac


class TelemetryStore:
    def __init__(
        self,
        path: str | None = None,
        flush_interval_s: float = 1.0,
        window_s: float = 60.0,
        max_queue: int = 100000,
        fsync: bool = False,
    ):
        self.path = path
        self.flush_interval_s = flush_interval_s
        self.window_s = window_s
        self.fsync = fsync
        self._queue: asyncio.Queue | None = None
        self._max_queue = max_queue
        self._writer_task: asyncio.Task | None = None
        self._flush_task: asyncio.Task | None = None
        self._fh = None
        self._window: deque[UsageRecord] = deque()
        self.dropped_records = 0
        self.total_requests = 0
        self.total_prompt_tokens = 0
        self.total_completion_tokens = 0

    # ------------------------------------------------------------------ #

    async def start(self) -> None:
        self._queue = asyncio.Queue(maxsize=self._max_queue)
        if self.path:
            self._fh = open(self.path, "a", encoding="utf-8")
        self._writer_task = asyncio.ensure_future(self._writer())
        self._flush_task = asyncio.ensure_future(self._flusher())

    async def stop(self) -> None:
        if self._writer_task is not None:
            await self.drain()
        for task in (self._writer_task, self._flush_task):
            if task is not None:
                task.cancel()
                try:
                    await task
                except asyncio.CancelledError:
                    pass
        self._writer_task = None
        self._flush_task = None
        if self._fh is not None:
            self._fh.flush()
            self._fh.close()
            self._fh = None

    def record(self, rec: UsageRecord) -> None:
        """Non-blocking append; lossy (counted) once the channel is full."""
        self.total_requests += 1
        self.total_prompt_tokens += rec.prompt_tokens
        self.total_completion_tokens += rec.completion_tokens
        self._window.append(rec)
        self._prune(now())
        if self._queue is None:
            return
        try:
            self._queue.put_nowait(rec)
        except asyncio.QueueFull:
            self.dropped_records += 1

    async def drain(self) -> None:
        """Wait until everything recorded so far is written and flushed."""
        if self._queue is not None:
            await self._queue.join()
        self._flush()

    async def _writer(self) -> None:
        assert self._queue is not None
        while True:
            rec = await self._queue.get()
            batch = [rec]
            while not self._queue.empty():
                batch.append(self._queue.get_nowait())
            if self._fh is not None:
                lines = [json.dumps(asdict(r), separators=(",", ":")) for r in batch]
                self._fh.write("\n".join(lines) + "\n")
            for _ in batch:
                self._queue.task_done()

    async def _flusher(self) -> None:
        while True:
            await asyncio.sleep(self.flush_interval_s)
            self._flush()

    def _flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())

    @staticmethod
    def load_records(path: str) -> list[UsageRecord]:
        """Recover flushed records from a log file (crash recovery)."""
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(UsageRecord(**json.loads(line)))
        return records

    # ------------------------------------------------------------------ #

    def _prune(self, at: float) -> None:
        cutoff = at - self.window_s
        while self._window and self._window[0].completed_at < cutoff:
            self._window.popleft()

    def window_records(self, window_s: float | None = None) -> list[UsageRecord]:
        at = now()
        self._prune(at)
        w = self.window_s if window_s is None else window_s
        cutoff = at - w
        return [r for r in self._window if r.completed_at >= cutoff]

    def snapshot(self, window_s: float | None = None) -> dict:
        """Throughput and latency quantiles over the trailing window."""
        w = self.window_s if window_s is None else window_s
        if w <= 0:
            raise ValueError("window must be > 0")
        records = self.window_records(w)
        ok = [r for r in records if r.outcome == "ok"]
        latencies = sorted(r.latency_s for r in ok)
        return {
            "window_s": w,
            "request_throughput": len(ok) / w,
            "output_token_throughput": sum(r.completion_tokens for r in ok) / w,
            "latency": {
                "p50": quantile(latencies, 0.50),
                "p90": quantile(latencies, 0.90),
                "p99": quantile(latencies, 0.99),
            },
            "completed": len(ok),
            "errors": len(records) - len(ok),
            "totals": {
                "requests": self.total_requests,
                "prompt_tokens": self.total_prompt_tokens,
                "completion_tokens": self.total_completion_tokens,
                "tokens": self.total_prompt_tokens + self.total_completion_tokens,
                "dropped_records": self.dropped_records,
            },
        }

    def metrics_over(self, records: Iterable[UsageRecord]) -> dict:
        """Span-based metrics for a completed run (first arrival to last completion)."""
        ok = [r for r in records if r.outcome == "ok"]
        if not ok:
            return {"request_throughput": 0.0, "output_token_throughput": 0.0,
                    "median_e2e_latency": 0.0, "duration": 0.0}
        start = min(r.arrived_at for r in ok)
        end = max(r.completed_at for r in ok)
        duration = max(end - start, 1e-12)
        latencies = sorted(r.latency_s for r in ok)
        return {
            "request_throughput": len(ok) / duration,
            "output_token_throughput": sum(r.completion_tokens for r in ok) / duration,
            "median_e2e_latency": quantile(latencies, 0.5),
            "duration": duration,
        }
