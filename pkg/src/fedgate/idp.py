"""Mock identity provider.

Stands in for the real OAuth2 identity service: mints opaque bearer tokens
and answers RFC 7662-style introspection over HTTP, so the gateway's provider
client is exercised on the wire format it would use in production.

Introspection contract:
    POST /introspect  (form field ``token``)
    -> {"active": bool, "sub": str, "exp": unix seconds, "groups": [str]}

Inactive tokens answer ``{"active": false}``; expired ones additionally carry
their ``exp`` so the caller can distinguish expiry from an unknown token.
"""

from __future__ import annotations

import asyncio
import random
from dataclasses import dataclass, field

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .config import DEFAULT_TOKEN_TTL_S
from .simclock import now


@dataclass
class AccessToken:
    raw: str
    subject: str
    groups: frozenset[str]
    issued_at: float
    expires_at: float

    def __post_init__(self) -> None:
        if self.expires_at <= self.issued_at:
            raise ValueError("expires_at must be after issued_at")

    def usable(self, at: float) -> bool:
        return at < self.expires_at


@dataclass
class MockIdentityProvider:
    """In-memory token store with an optional simulated introspection delay."""

    introspection_delay_s: float = 0.0
    seed: int | None = None
    introspection_calls: int = 0  # instrumentation for cache tests
    _tokens: dict[str, AccessToken] = field(default_factory=dict)
    _counter: int = 0

    def __post_init__(self) -> None:
        self._rng = random.Random(self.seed)

    def mint_token(
        self,
        subject: str,
        groups: set[str] | frozenset[str] = frozenset(),
        ttl_s: float = DEFAULT_TOKEN_TTL_S,
    ) -> AccessToken:
        if ttl_s <= 0:
            raise ValueError("ttl_s must be > 0")
        self._counter += 1
        raw = f"tok-{subject}-{self._counter}-{self._rng.getrandbits(64):016x}"
        issued = now()
        token = AccessToken(
            raw=raw,
            subject=subject,
            groups=frozenset(groups),
            issued_at=issued,
            expires_at=issued + ttl_s,
        )
        self._tokens[raw] = token
        return token

    def revoke(self, raw: str) -> None:
        self._tokens.pop(raw, None)

    def introspect_locally(self, raw: str) -> dict:
        """The introspection decision, shared by the HTTP route."""
        self.introspection_calls += 1
        token = self._tokens.get(raw)
        if token is None:
            return {"active": False}
        if not token.usable(now()):
            return {"active": False, "exp": token.expires_at}
        return {
            "active": True,
            "sub": token.subject,
            "exp": token.expires_at,
            "groups": sorted(token.groups),
        }

    def build_app(self) -> FastAPI:
        app = FastAPI(title="mock-idp")

        @app.post("/introspect")
        async def introspect(request: Request) -> JSONResponse:
            form = await request.form()
            raw = str(form.get("token", ""))
            if not raw:
                return JSONResponse({"active": False}, status_code=200)
            if self.introspection_delay_s > 0:
                await asyncio.sleep(self.introspection_delay_s)
            return JSONResponse(self.introspect_locally(raw))

        @app.post("/token")
        async def token(request: Request) -> JSONResponse:
            # Mock-only self-service issuance; the console's login flow and
            # demo scripts obtain bearer tokens here.
            try:
                body = await request.json()
            except Exception:
                body = {}
            subject = str(body.get("subject") or "demo-user")
            groups = frozenset(str(g) for g in body.get("groups", ()))
            ttl = float(body.get("ttl_s") or DEFAULT_TOKEN_TTL_S)
            try:
                minted = self.mint_token(subject, groups, ttl)
            except ValueError as exc:
                return JSONResponse({"error": str(exc)}, status_code=422)
            return JSONResponse({
                "access_token": minted.raw,
                "token_type": "Bearer",
                "expires_at": minted.expires_at,
                "subject": minted.subject,
                "groups": sorted(minted.groups),
            }, status_code=201)

        return app
