"""Wires the whole service together from one Config.

A ServiceStack owns the mock identity provider (or a client to an external
one), the introspection cache, rate limiter, registry, compute fabric,
federation router, telemetry store, batch engine, and the gateway ASGI app.
Tests and the benchmark harness build stacks in-process; ``fedgate serve``
runs one under uvicorn.
"""

from __future__ import annotations

import tempfile

import httpx

from .auth import AccessPolicy, TokenIntrospector
from .batch import BatchEngine
from .config import Config, ConfigError, ModelConfig, load_config, model_config_from_dict
from .errors import ValidationError
from .fabric import ComputeFabric
from .gateway import build_app
from .idp import MockIdentityProvider
from .ratelimit import RateLimiter
from .router import FederationRouter, ModelRegistry
from .telemetry import TelemetryStore


class ServiceStack:
    def __init__(self, config: Config):
        config.validate()
        self.config = config
        self.pending_tasks = 0

        self.idp = MockIdentityProvider(
            introspection_delay_s=config.auth.introspection_delay_s,
            seed=config.seed,
        )
        self.idp_app = self.idp.build_app()
        if config.auth.introspection_url:
            self._idp_client = httpx.AsyncClient()
            introspection_url = config.auth.introspection_url
        else:
            self._idp_client = httpx.AsyncClient(
                transport=httpx.ASGITransport(app=self.idp_app),
                base_url="http://idp.internal",
            )
            introspection_url = "http://idp.internal/introspect"
        self.introspector = TokenIntrospector(
            introspection_url,
            self._idp_client,
            cache_ttl_s=config.auth.cache_ttl_s,
            cache_enabled=config.auth.cache_enabled,
        )

        self.limiter = RateLimiter(
            capacity=config.rate_limit.capacity,
            refill_per_s=config.rate_limit.refill_per_s,
            enabled=config.rate_limit.enabled,
        )

        self.registry = ModelRegistry()
        self.policy = AccessPolicy()
        for ep in config.endpoints:
            self.registry.add_endpoint(ep)
        self.fabric = ComputeFabric(config, model_lookup=self.registry.model_config)
        self.router = FederationRouter(
            self.registry, self.fabric, probe_cache_s=config.fabric.probe_cache_s)
        for m in config.models:
            self._register(m)

        self.telemetry = TelemetryStore(
            path=config.telemetry.path,
            flush_interval_s=config.telemetry.flush_interval_s,
            window_s=config.telemetry.window_s,
            max_queue=config.telemetry.max_queue,
            fsync=config.telemetry.fsync,
        )

        store_dir = config.batch.store_dir or tempfile.mkdtemp(prefix="fedgate-batch-")
        self.batch_engine = BatchEngine(config.batch, self.fabric, self.router, store_dir)

        self.app = build_app(self)
        if not config.auth.introspection_url:
            # Demo convenience: expose the in-process mock IdP (token issuance
            # and introspection) on the same listener, under /idp.
            self.app.mount("/idp", self.idp_app)

    # ------------------------------------------------------------------ #

    def _register(self, mcfg: ModelConfig) -> None:
        self.registry.register_model(mcfg)
        self.policy.set(mcfg.name, mcfg.required_groups)

    def register_model_dict(self, body: dict) -> str:
        """Admin route entry: body uses the config-file model schema."""
        try:
            mcfg = model_config_from_dict(body)
        except (ConfigError, TypeError) as exc:
            raise ValidationError(str(exc)) from exc
        self._register(mcfg)
        return mcfg.name

    async def start(self) -> None:
        await self.telemetry.start()
        await self.fabric.start()

    async def stop(self) -> None:
        await self.fabric.stop()
        await self.telemetry.stop()
        await self._idp_client.aclose()

    # Convenience for tests/bench: a token the gateway will accept.
    def mint(self, subject: str = "user", groups: set[str] | None = None,
             ttl_s: float | None = None) -> str:
        return self.idp.mint_token(
            subject,
            frozenset(groups or ()),
            ttl_s if ttl_s is not None else self.config.auth.token_ttl_s,
        ).raw


def build_stack(config_data: dict | Config) -> ServiceStack:
    if isinstance(config_data, Config):
        return ServiceStack(config_data)
    return ServiceStack(load_config(config_data))
