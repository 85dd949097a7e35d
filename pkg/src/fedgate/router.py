"""Model/endpoint registry and federated endpoint selection.

Selection follows a strict three-rule priority order:

  1. an endpoint where an instance of the model is already running, starting,
     or queued (any in-flight provisioning counts); lowest configured
     position wins ties;
  2. else an endpoint whose cluster has enough free nodes for one instance;
  3. else the first endpoint configured for the model.

``select_endpoint`` is a pure function of its snapshot arguments, so routing
decisions are reproducible and testable against an independent oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .config import EndpointConfig, ModelConfig
from .errors import DuplicateModel, NoEndpoint, UnknownModel
from .fabric import ClusterStatus, ComputeFabric, TaskRef
from .simclock import now
from .tasks import InferenceTask

_AFFINE_STATES = ("running", "starting", "queued")


@dataclass
class ModelEntry:
    config: ModelConfig
    endpoint_ids: list[str]  # configuration order defines priority


@dataclass
class ModelRegistry:
    """Model name -> spec + ordered endpoint list; writes are atomic swaps."""

    endpoints: dict[str, EndpointConfig] = field(default_factory=dict)
    _models: dict[str, ModelEntry] = field(default_factory=dict)

    def add_endpoint(self, cfg: EndpointConfig) -> None:
        self.endpoints[cfg.endpoint_id] = cfg

    def register_model(self, cfg: ModelConfig) -> None:
        if cfg.name in self._models:
            raise DuplicateModel(f"model {cfg.name!r} already registered")
        cfg.validate()
        for ep_id in cfg.endpoints:
            if ep_id not in self.endpoints:
                raise NoEndpoint(f"model {cfg.name}: unknown endpoint {ep_id!r}")
        models = dict(self._models)
        models[cfg.name] = ModelEntry(config=cfg, endpoint_ids=list(cfg.endpoints))
        self._models = models

    def get(self, model: str) -> ModelEntry:
        entry = self._models.get(model)
        if entry is None:
            raise UnknownModel(f"model {model!r} is not registered")
        return entry

    def model_config(self, model: str) -> ModelConfig:
        return self.get(model).config

    def has(self, model: str) -> bool:
        return model in self._models

    def names(self) -> list[str]:
        return list(self._models)

    def candidates(self, model: str) -> list[tuple[int, EndpointConfig]]:
        """(config_index, endpoint) pairs in configuration order."""
        entry = self.get(model)
        return [(i, self.endpoints[ep_id]) for i, ep_id in enumerate(entry.endpoint_ids)]


def nodes_needed(gpus_required: int, gpus_per_node: int) -> int:
    return max(1, -(-gpus_required // gpus_per_node))


def select_endpoint(
    model: str,
    registry: ModelRegistry,
    instance_states: dict[str, list[str]],
    cluster_statuses: dict[str, ClusterStatus],
) -> str:
    """Pick the target endpoint for one request (pure; see module docstring).

    ``instance_states`` maps endpoint_id -> live instance states for the
    model; ``cluster_statuses`` maps cluster_id -> probed status.
    """
    candidates = registry.candidates(model)
    if not candidates:
        raise NoEndpoint(f"model {model!r} has no configured endpoints")
    gpus_required = registry.model_config(model).gpus_required

    for _, ep in candidates:
        states = instance_states.get(ep.endpoint_id, ())
        if any(s in _AFFINE_STATES for s in states):
            return ep.endpoint_id

    for _, ep in candidates:
        status = cluster_statuses.get(ep.cluster_id)
        if status is None:
            continue
        if status.free_nodes >= nodes_needed(gpus_required, status.gpus_per_node):
            return ep.endpoint_id

    return candidates[0][1].endpoint_id


class FederationRouter:
    """Selection plus dispatch against the fabric, with probe caching."""

    def __init__(self, registry: ModelRegistry, fabric: ComputeFabric, probe_cache_s: float = 2.0):
        self.registry = registry
        self.fabric = fabric
        self.probe_cache_s = probe_cache_s
        self._probe_cache: dict[str, ClusterStatus] = {}

    def probe_cluster(self, cluster_id: str) -> ClusterStatus:
        """Cluster status, cached for ``probe_cache_s`` to bound probe traffic."""
        cached = self._probe_cache.get(cluster_id)
        if cached is not None and now() - cached.observed_at < self.probe_cache_s:
            return cached
        status = self.fabric.cluster_status(cluster_id)
        self._probe_cache[cluster_id] = status
        return status

    def route(self, model: str) -> str:
        clusters_involved = {
            self.registry.endpoints[ep_id].cluster_id for ep_id in self.registry.get(model).endpoint_ids
        }
        statuses = {cid: self.probe_cluster(cid) for cid in sorted(clusters_involved)}
        return select_endpoint(
            model, self.registry, self.fabric.instance_states(model), statuses
        )

    def dispatch(self, task: InferenceTask, endpoint_id: str | None = None) -> TaskRef:
        """Route (unless pinned) and enqueue; returns the completion handle."""
        target = endpoint_id or self.route(task.model)
        return self.fabric.submit(task, target)

    def select_for_allocation(self, model: str) -> str:
        """Endpoint choice for a fresh dedicated allocation (batch jobs):
        availability first, then configuration order. Affinity to online
        instances is irrelevant since the job never shares them."""
        candidates = self.registry.candidates(model)
        if not candidates:
            raise NoEndpoint(f"model {model!r} has no configured endpoints")
        gpus_required = self.registry.model_config(model).gpus_required
        for _, ep in candidates:
            status = self.probe_cluster(ep.cluster_id)
            if status.free_nodes >= nodes_needed(gpus_required, status.gpus_per_node):
                return ep.endpoint_id
        return candidates[0][1].endpoint_id
