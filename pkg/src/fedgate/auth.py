"""Token introspection, caching, and group-based authorization.

The gateway validates bearer tokens against the identity provider's
``/introspect`` route and caches the resulting :class:`Principal` keyed by a
hash of the token. A cache hit never contacts the provider; concurrent misses
for the same token coalesce onto a single in-flight provider call. Cached
entries are never served at or past the token's own expiry, no matter the
cache TTL.
"""

from __future__ import annotations

import asyncio
import hashlib
from dataclasses import dataclass, field

import httpx

from .errors import ExpiredToken, InvalidToken, PermissionDenied, UnknownModel
from .simclock import now


@dataclass(frozen=True)
class Principal:
    subject: str
    groups: frozenset[str]
    introspected_at: float
    token_expires_at: float


@dataclass
class AccessPolicy:
    """model name -> required groups; empty set admits any authenticated user."""

    required_groups: dict[str, frozenset[str]] = field(default_factory=dict)

    def set(self, model: str, groups: frozenset[str]) -> None:
        self.required_groups[model] = frozenset(groups)

    def lookup(self, model: str) -> frozenset[str]:
        if model not in self.required_groups:
            raise UnknownModel(f"model {model!r} is not registered")
        return self.required_groups[model]


def authorize(principal: Principal, model: str, policy: AccessPolicy) -> bool:
    """Pure allow/deny decision; raises UnknownModel for unregistered models."""
    required = policy.lookup(model)
    if not required:
        return True
    return bool(principal.groups & required)


def require_access(principal: Principal, model: str, policy: AccessPolicy) -> None:
    if not authorize(principal, model, policy):
        raise PermissionDenied(f"access to model {model!r} requires group membership")


class TokenIntrospector:
    """Provider client with a TTL cache bounded by token expiry."""

    def __init__(
        self,
        introspection_url: str,
        http_client: httpx.AsyncClient,
        cache_ttl_s: float = 600.0,
        cache_enabled: bool = True,
    ):
        self._url = introspection_url
        self._client = http_client
        self._ttl = cache_ttl_s
        self._enabled = cache_enabled
        self._cache: dict[str, tuple[Principal, float]] = {}  # key -> (principal, good_until)
        self._inflight: dict[str, asyncio.Future] = {}
        self.provider_calls = 0  # instrumentation

    @staticmethod
    def _key(raw: str) -> str:
        return hashlib.sha256(raw.encode()).hexdigest()

    async def introspect(self, raw: str) -> Principal:
        if not raw:
            raise InvalidToken("empty bearer token")
        key = self._key(raw)
        if self._enabled:
            hit = self._cache.get(key)
            if hit is not None:
                principal, good_until = hit
                t = now()
                if t < good_until and t < principal.token_expires_at:
                    return principal
                self._cache.pop(key, None)

        pending = self._inflight.get(key)
        if pending is not None and not pending.done():
            # Coalesce: ride the in-flight provider call. shield() keeps a
            # cancelled waiter from cancelling the shared fetch.
            return await asyncio.shield(pending)

        task = asyncio.ensure_future(self._fetch(raw))
        self._inflight[key] = task

        def _cleanup(t: asyncio.Task) -> None:
            if self._inflight.get(key) is t:
                del self._inflight[key]
            if not t.cancelled():
                t.exception()  # mark retrieved even if every waiter went away

        task.add_done_callback(_cleanup)
        return await asyncio.shield(task)

    async def _fetch(self, raw: str) -> Principal:
        self.provider_calls += 1
        try:
            resp = await self._client.post(self._url, data={"token": raw})
        except httpx.HTTPError as exc:
            raise InvalidToken(f"identity provider unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise InvalidToken(f"identity provider error {resp.status_code}")
        body = resp.json()
        if not body.get("active", False):
            if "exp" in body:
                raise ExpiredToken("token expired")
            raise InvalidToken("token is not active")
        expires_at = float(body["exp"])
        t = now()
        if t >= expires_at:
            raise ExpiredToken("token expired")
        principal = Principal(
            subject=str(body["sub"]),
            groups=frozenset(body.get("groups", ())),
            introspected_at=t,
            token_expires_at=expires_at,
        )
        if self._enabled:
            good_until = min(t + self._ttl, expires_at)
            self._cache[self._key(raw)] = (principal, good_until)
        return principal
