"""Service configuration: one structured JSON document.

The same schema backs the gateway config file and the simulator scenario
files used by tests and the benchmark harness. Unknown keys are rejected so
typos fail loudly. See README for the documented field list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

GB = 1e9  # decimal gigabytes throughout (40 GB GPU = 40e9 bytes)
DEFAULT_TOKEN_TTL_S = 48 * 3600.0


class ConfigError(ValueError):
    pass


@dataclass
class ClusterConfig:
    cluster_id: str
    nodes: int = 24
    gpus_per_node: int = 8
    vram_per_gpu_gb: float = 40.0
    alloc_delay_s: float = 0.0

    @property
    def vram_per_gpu_bytes(self) -> float:
        return self.vram_per_gpu_gb * GB


@dataclass
class EndpointConfig:
    endpoint_id: str
    cluster_id: str
    max_instances_per_model: int = 4
    max_parallel_per_instance: int = 16
    registered_functions: tuple[str, ...] = ("infer_v1", "embed_v1")


@dataclass
class ModelConfig:
    name: str
    params_billions: float
    endpoints: list[str]
    gpus_required: int = 1
    backend: str = "mock"  # mock | passthrough
    service_rate: float = 100.0  # output tokens/s per instance at saturation
    per_request_overhead_s: float = 0.0
    bytes_per_param: float = 2.0
    embedding_dim: int | None = None
    required_groups: frozenset[str] = frozenset()
    max_output_tokens: int = 4096
    default_target_tokens: int = 128
    passthrough_base_url: str | None = None
    emit_chunk_tokens: int = 1  # tokens emitted per timer event (mock)

    @property
    def weight_bytes(self) -> float:
        return self.params_billions * 1e9 * self.bytes_per_param

    def validate(self) -> None:
        if self.gpus_required < 1:
            raise ConfigError(f"model {self.name}: gpus_required must be >= 1")
        if self.weight_bytes <= 0:
            raise ConfigError(f"model {self.name}: weight_bytes must be > 0")
        if not self.endpoints:
            raise ConfigError(f"model {self.name}: at least one endpoint required")
        if len(set(self.endpoints)) != len(self.endpoints):
            raise ConfigError(f"model {self.name}: duplicate endpoints in priority list")
        if self.backend not in ("mock", "passthrough"):
            raise ConfigError(f"model {self.name}: unknown backend {self.backend!r}")
        if self.backend == "mock" and self.service_rate <= 0:
            raise ConfigError(f"model {self.name}: service_rate must be > 0")
        if self.backend == "passthrough" and not self.passthrough_base_url:
            raise ConfigError(f"model {self.name}: passthrough_base_url required")


@dataclass
class AuthConfig:
    cache_enabled: bool = True
    cache_ttl_s: float = 600.0
    token_ttl_s: float = DEFAULT_TOKEN_TTL_S
    admin_group: str = "admins"
    introspection_url: str | None = None  # None => in-process mock IdP
    introspection_delay_s: float = 0.0  # simulated provider latency (mock IdP)


@dataclass
class RateLimitConfig:
    capacity: float = 100.0
    refill_per_s: float = 50.0
    enabled: bool = True


@dataclass
class GatewayConfig:
    host: str = "127.0.0.1"
    port: int = 8080
    max_pending_tasks: int = 10000
    show_stopped_models: bool = False
    default_max_tokens: int = 128


@dataclass
class FabricConfig:
    autoscale_tick_s: float = 1.0
    idle_tick_s: float = 1.0
    health_tick_s: float = 1.0
    idle_timeout_s: float = 7200.0
    load_base_s: float = 10.0
    load_bandwidth_gb_s: float = 2.0
    alloc_retry_tick_s: float = 1.0
    retry_cap: int = 2
    queue_when_saturated: bool = True
    probe_cache_s: float = 2.0

    @property
    def load_bandwidth_bytes_s(self) -> float:
        return self.load_bandwidth_gb_s * GB


@dataclass
class TelemetryConfig:
    path: str | None = None  # None => in-memory only (no durable log)
    flush_interval_s: float = 1.0
    window_s: float = 60.0
    max_queue: int = 100000
    fsync: bool = False


@dataclass
class BatchConfig:
    store_dir: str | None = None  # None => temp directory per stack
    max_lines: int = 100000


@dataclass
class FaultEvent:
    at: float
    model: str
    endpoint_id: str | None = None  # None => any instance of the model


@dataclass
class Config:
    clusters: list[ClusterConfig] = field(default_factory=list)
    endpoints: list[EndpointConfig] = field(default_factory=list)
    models: list[ModelConfig] = field(default_factory=list)
    auth: AuthConfig = field(default_factory=AuthConfig)
    rate_limit: RateLimitConfig = field(default_factory=RateLimitConfig)
    gateway: GatewayConfig = field(default_factory=GatewayConfig)
    fabric: FabricConfig = field(default_factory=FabricConfig)
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    faults: list[FaultEvent] = field(default_factory=list)
    seed: int = 0
    clock: str = "virtual"  # virtual | wall

    def validate(self) -> None:
        cluster_ids = {c.cluster_id for c in self.clusters}
        if len(cluster_ids) != len(self.clusters):
            raise ConfigError("duplicate cluster_id")
        endpoint_ids = {e.endpoint_id for e in self.endpoints}
        if len(endpoint_ids) != len(self.endpoints):
            raise ConfigError("duplicate endpoint_id")
        for ep in self.endpoints:
            if ep.cluster_id not in cluster_ids:
                raise ConfigError(f"endpoint {ep.endpoint_id}: unknown cluster {ep.cluster_id}")
        names = set()
        for m in self.models:
            if m.name in names:
                raise ConfigError(f"duplicate model {m.name}")
            names.add(m.name)
            m.validate()
            for ep_id in m.endpoints:
                if ep_id not in endpoint_ids:
                    raise ConfigError(f"model {m.name}: unknown endpoint {ep_id}")
        if self.clock not in ("virtual", "wall"):
            raise ConfigError(f"clock must be virtual|wall, got {self.clock!r}")


_SECTION_TYPES = {
    "auth": AuthConfig,
    "rate_limit": RateLimitConfig,
    "gateway": GatewayConfig,
    "fabric": FabricConfig,
    "telemetry": TelemetryConfig,
    "batch": BatchConfig,
}


def _build(cls: type, data: dict[str, Any], where: str) -> Any:
    fields = {f for f in cls.__dataclass_fields__}  # type: ignore[attr-defined]
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**data)


def load_config(data: dict[str, Any]) -> Config:
    """Build and validate a :class:`Config` from a parsed JSON document."""
    data = dict(data)
    cfg = Config()
    for c in data.pop("clusters", []):
        cfg.clusters.append(_build(ClusterConfig, c, "clusters[]"))
    for e in data.pop("endpoints", []):
        cfg.endpoints.append(_build(EndpointConfig, dict(e, registered_functions=tuple(
            e.get("registered_functions", ("infer_v1", "embed_v1")))), "endpoints[]"))
    for m in data.pop("models", []):
        m = dict(m)
        m["required_groups"] = frozenset(m.get("required_groups", ()))
        cfg.models.append(_build(ModelConfig, m, "models[]"))
    for section, cls in _SECTION_TYPES.items():
        if section in data:
            setattr(cfg, section, _build(cls, data.pop(section), section))
    for f in data.pop("faults", []):
        cfg.faults.append(_build(FaultEvent, f, "faults[]"))
    cfg.seed = int(data.pop("seed", 0))
    cfg.clock = data.pop("clock", "virtual")
    if data:
        raise ConfigError(f"unknown top-level keys {sorted(data)}")
    cfg.validate()
    return cfg


def model_config_from_dict(data: dict[str, Any]) -> ModelConfig:
    """Parse one model definition (same schema as the config file's models[])."""
    data = dict(data)
    data["required_groups"] = frozenset(data.get("required_groups", ()))
    mcfg = _build(ModelConfig, data, "model")
    mcfg.validate()
    return mcfg


def load_config_file(path: str | Path) -> Config:
    with open(path, "r", encoding="utf-8") as fh:
        return load_config(json.load(fh))
