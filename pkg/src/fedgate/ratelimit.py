"""Per-principal token-bucket rate limiting."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .simclock import now


@dataclass
class TokenBucket:
    capacity: float
    refill_per_s: float
    level: float
    updated_at: float

    def _refill(self, at: float) -> None:
        if at > self.updated_at:
            self.level = min(self.capacity, self.level + (at - self.updated_at) * self.refill_per_s)
            self.updated_at = at

    def try_acquire(self, at: float, cost: float = 1.0) -> bool:
        self._refill(at)
        if self.level >= cost:
            self.level -= cost
            return True
        return False

    def retry_after(self, at: float, cost: float = 1.0) -> float:
        """Seconds until the bucket can cover ``cost`` (0 if it already can)."""
        self._refill(at)
        deficit = cost - self.level
        if deficit <= 0:
            return 0.0
        if self.refill_per_s <= 0:
            return math.inf
        return deficit / self.refill_per_s


class RateLimiter:
    """One bucket per principal subject; buckets start full."""

    def __init__(self, capacity: float = 100.0, refill_per_s: float = 50.0, enabled: bool = True):
        self.capacity = capacity
        self.refill_per_s = refill_per_s
        self.enabled = enabled
        self._buckets: dict[str, TokenBucket] = {}

    def _bucket(self, subject: str) -> TokenBucket:
        bucket = self._buckets.get(subject)
        if bucket is None:
            bucket = TokenBucket(
                capacity=self.capacity,
                refill_per_s=self.refill_per_s,
                level=self.capacity,
                updated_at=now(),
            )
            self._buckets[subject] = bucket
        return bucket

    def check(self, subject: str) -> tuple[bool, float]:
        """Returns (allowed, retry_after_s)."""
        if not self.enabled:
            return True, 0.0
        bucket = self._bucket(subject)
        t = now()
        if bucket.try_acquire(t):
            return True, 0.0
        return False, bucket.retry_after(t)
