"""Simulated HPC compute fabric.

Models the cluster-side machinery the gateway dispatches into: batch-scheduler
node allocation (strict FIFO, first-fit GPU packing with co-location),
instance lifecycle (queued -> starting -> running -> released, with failure
and restart), auto-scaling, idle release of hot nodes, and health-monitor
restarts. All state lives on the event loop; callers interact through
completion handles, never by polling.

Timing model (virtual seconds by default):
  cold start = scheduler queue wait + node allocation delay + weight loading
  load time  = load_base_s + weight_bytes / load_bandwidth_bytes_s
"""

from __future__ import annotations

import asyncio
import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable

from .backends import MockBackend, PassthroughBackend, prompt_token_count
from .config import ClusterConfig, Config, EndpointConfig, FabricConfig, ModelConfig
from .errors import (
    CapacityExceeded,
    EndpointDown,
    FedgateError,
    IllegalTransition,
    InsufficientVRAM,
    NoEndpoint,
    TaskFailed,
    UnknownCluster,
    UnregisteredFunction,
)
from .simclock import now
from .tasks import InferenceResult, InferenceTask

logger = logging.getLogger(__name__)


class InstanceState(str, Enum):
    QUEUED = "queued"
    STARTING = "starting"
    RUNNING = "running"
    RELEASED = "released"
    FAILED = "failed"


_LEGAL_TRANSITIONS: dict[InstanceState, set[InstanceState]] = {
    InstanceState.QUEUED: {InstanceState.STARTING, InstanceState.FAILED},
    InstanceState.STARTING: {InstanceState.RUNNING, InstanceState.FAILED},
    InstanceState.RUNNING: {InstanceState.RELEASED, InstanceState.FAILED},
    InstanceState.FAILED: {InstanceState.QUEUED},
    InstanceState.RELEASED: set(),
}

_LIVE_STATES = {InstanceState.QUEUED, InstanceState.STARTING, InstanceState.RUNNING}


@dataclass
class Node:
    node_id: int
    cluster_id: str
    gpu_count: int
    vram_per_gpu: float
    free_gpus: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.free_gpus:
            self.free_gpus = list(range(self.gpu_count))

    @property
    def is_free(self) -> bool:
        return len(self.free_gpus) == self.gpu_count


@dataclass
class ClusterStatus:
    cluster_id: str
    total_nodes: int
    free_nodes: int
    queued_jobs: int
    gpus_per_node: int
    observed_at: float


class ModelInstance:
    """One deployed copy of a model; state transitions are guarded."""

    def __init__(self, instance_id: str, model: str, endpoint_id: str, gpus_required: int,
                 dedicated: bool = False):
        self.instance_id = instance_id
        self.model = model
        self.endpoint_id = endpoint_id
        self.gpus_required = gpus_required
        self.dedicated = dedicated
        self._state = InstanceState.QUEUED
        self.gpus: list[tuple[int, int]] = []  # (node_id, gpu index)
        self.in_flight = 0
        self.submitted_at = now()
        self.allocated_at: float | None = None
        self.loading_started_at: float | None = None
        self.running_since: float | None = None
        self.released_at: float | None = None
        self.last_active_at = self.submitted_at
        self.permanent_failure: str | None = None
        self.active_refs: set["TaskRef"] = set()
        self.pinned_pending: deque["TaskRef"] = deque()
        self.load_task: asyncio.Task | None = None
        self.transition_log: list[tuple[float, InstanceState, InstanceState]] = []
        self._state_waiters: list[asyncio.Future] = []

    @property
    def state(self) -> InstanceState:
        return self._state

    def set_state(self, new: InstanceState) -> None:
        if new not in _LEGAL_TRANSITIONS[self._state]:
            raise IllegalTransition(
                f"{self.instance_id}: illegal transition {self._state.value} -> {new.value}"
            )
        self.transition_log.append((now(), self._state, new))
        self._state = new
        waiters, self._state_waiters = self._state_waiters, []
        for fut in waiters:
            if not fut.done():
                fut.set_result(None)

    async def wait_state_change(self) -> None:
        fut = asyncio.get_running_loop().create_future()
        self._state_waiters.append(fut)
        await fut

    @property
    def is_live(self) -> bool:
        return self._state in _LIVE_STATES

    def cold_start_segments(self) -> dict[str, float]:
        """queue wait / allocation / load durations once running."""
        if self.running_since is None or self.allocated_at is None or self.loading_started_at is None:
            return {}
        return {
            "queue_wait_s": self.allocated_at - self.submitted_at,
            "alloc_s": self.loading_started_at - self.allocated_at,
            "load_s": self.running_since - self.loading_started_at,
        }

    def nodes(self) -> list[int]:
        seen: list[int] = []
        for node_id, _ in self.gpus:
            if node_id not in seen:
                seen.append(node_id)
        return seen


@dataclass
class AllocationJob:
    instance: ModelInstance
    gpus_required: int
    submitted_at: float


class TaskRef:
    """Dispatch handle: resolved exactly once with a result or an error."""

    def __init__(self, task: InferenceTask, stream: bool = False):
        self.task = task
        self.future: asyncio.Future = asyncio.get_running_loop().create_future()
        self.stream_q: asyncio.Queue | None = asyncio.Queue() if stream else None
        self.failures = 0
        self.streamed_any = False
        self.detached = False  # set when a failure handler reclaims the ref
        self.pinned_instance: ModelInstance | None = None
        self.attempt_task: asyncio.Task | None = None

    def resolve_ok(self, result: InferenceResult) -> None:
        if self.future.done():
            return
        self.task.completed_at = now()
        self.future.set_result(result)
        if self.stream_q is not None:
            self.stream_q.put_nowait(("done", result))

    def resolve_err(self, exc: Exception) -> None:
        if self.future.done():
            return
        self.task.completed_at = now()
        self.future.set_exception(exc)
        self.future.exception()  # retrieved: stream consumers may only read the queue
        if self.stream_q is not None:
            self.stream_q.put_nowait(("error", exc))

    async def result(self) -> InferenceResult:
        return await asyncio.shield(self.future)


class Cluster:
    """Nodes plus a strict-FIFO allocation queue (no backfill)."""

    def __init__(self, cfg: ClusterConfig, on_grant: Callable[[AllocationJob], None]):
        self.cfg = cfg
        self.nodes = [
            Node(node_id=i, cluster_id=cfg.cluster_id, gpu_count=cfg.gpus_per_node,
                 vram_per_gpu=cfg.vram_per_gpu_bytes)
            for i in range(cfg.nodes)
        ]
        self.queue: deque[AllocationJob] = deque()
        self._on_grant = on_grant

    @property
    def total_nodes(self) -> int:
        return len(self.nodes)

    @property
    def free_node_count(self) -> int:
        return sum(1 for n in self.nodes if n.is_free)

    def first_fit(self, gpus_required: int) -> list[tuple[int, int]] | None:
        """First-fit placement in node-id order; None if it does not fit now.

        A request for at most one node's worth of GPUs co-locates onto the
        first node with enough free GPUs. Larger requests take whole free
        nodes, ceil(g / gpus_per_node) of them.
        """
        g = gpus_required
        per_node = self.cfg.gpus_per_node
        if g <= per_node:
            for node in self.nodes:
                if len(node.free_gpus) >= g:
                    return [(node.node_id, idx) for idx in node.free_gpus[:g]]
            return None
        nodes_needed = -(-g // per_node)
        whole = [n for n in self.nodes if n.is_free][:nodes_needed]
        if len(whole) < nodes_needed:
            return None
        return [(n.node_id, idx) for n in whole for idx in range(per_node)]

    def submit(self, job: AllocationJob) -> None:
        self.queue.append(job)
        self.pump()

    def cancel_job(self, instance: ModelInstance) -> None:
        self.queue = deque(j for j in self.queue if j.instance is not instance)

    def pump(self) -> None:
        """Grant from the head while it fits; a stuck head blocks the tail."""
        while self.queue:
            head = self.queue[0]
            placement = self.first_fit(head.gpus_required)
            if placement is None:
                return
            self.queue.popleft()
            self._take(placement)
            self._on_grant_with_placement(head, placement)

    def _on_grant_with_placement(self, job: AllocationJob, placement: list[tuple[int, int]]) -> None:
        job.instance.gpus = placement
        self._on_grant(job)

    def _take(self, placement: list[tuple[int, int]]) -> None:
        by_node: dict[int, list[int]] = {}
        for node_id, idx in placement:
            by_node.setdefault(node_id, []).append(idx)
        for node_id, idxs in by_node.items():
            node = self.nodes[node_id]
            for idx in idxs:
                node.free_gpus.remove(idx)

    def release(self, placement: Iterable[tuple[int, int]]) -> None:
        for node_id, idx in placement:
            node = self.nodes[node_id]
            if idx in node.free_gpus:
                raise IllegalTransition(f"double free of GPU {idx} on node {node_id}")
            node.free_gpus.append(idx)
            node.free_gpus.sort()
        self.pump()


class EndpointRuntime:
    def __init__(self, cfg: EndpointConfig, cluster: Cluster):
        self.cfg = cfg
        self.cluster = cluster
        self.instances: dict[str, list[ModelInstance]] = {}
        self.pending: dict[str, deque[TaskRef]] = {}

    def live(self, model: str) -> list[ModelInstance]:
        return [i for i in self.instances.get(model, []) if i.is_live]

    def shared_live(self, model: str) -> list[ModelInstance]:
        return [i for i in self.live(model) if not i.dedicated]

    def pending_for(self, model: str) -> deque[TaskRef]:
        return self.pending.setdefault(model, deque())


class ComputeFabric:
    """Event-driven simulator for the cluster side of the service."""

    def __init__(
        self,
        config: Config,
        model_lookup: Callable[[str], ModelConfig],
        passthrough_client_factory: Callable[[str], Any] | None = None,
    ):
        self.cfg: FabricConfig = config.fabric
        self._model_lookup = model_lookup
        # base_url -> httpx client; overridable so tests can stub upstreams
        self.passthrough_client_factory = passthrough_client_factory
        self.seed = config.seed
        self.clusters: dict[str, Cluster] = {
            c.cluster_id: Cluster(c, self._on_allocated) for c in config.clusters
        }
        self.endpoints: dict[str, EndpointRuntime] = {}
        for e in config.endpoints:
            if e.cluster_id not in self.clusters:
                raise UnknownCluster(e.cluster_id)
            self.endpoints[e.endpoint_id] = EndpointRuntime(e, self.clusters[e.cluster_id])
        self._backends: dict[str, MockBackend | PassthroughBackend] = {}
        self._running = False
        self._bg: list[asyncio.Task] = []
        self._instance_seq = 0
        self._listeners: list[Callable[[dict], None]] = []
        self._fault_schedule = list(config.faults)
        self.allocation_jobs_submitted = 0
        self.status_queries = 0

    # ------------------------------------------------------------------ #
    # lifecycle
    # ------------------------------------------------------------------ #

    async def start(self, run_ticks: bool = True) -> None:
        """Accept work; with ``run_ticks`` the periodic maintenance loops run
        too (tests drive autoscale/reaper/health ticks manually without)."""
        self._running = True
        if run_ticks:
            self._bg = [
                asyncio.ensure_future(self._tick_loop(self.cfg.autoscale_tick_s, self._autoscale_all)),
                asyncio.ensure_future(self._tick_loop(self.cfg.idle_tick_s, self._reap_idle)),
                asyncio.ensure_future(self._tick_loop(self.cfg.health_tick_s, self.health_tick)),
            ]
        if self._fault_schedule:
            self._bg.append(asyncio.ensure_future(self._run_fault_schedule()))

    async def _run_fault_schedule(self) -> None:
        """Apply the scenario's scripted failures at their virtual times."""
        t0 = now()
        for event in sorted(self._fault_schedule, key=lambda e: e.at):
            delay = t0 + event.at - now()
            if delay > 0:
                await asyncio.sleep(delay)
            candidates = [
                inst
                for ep in self.endpoints.values()
                if event.endpoint_id in (None, ep.cfg.endpoint_id)
                for inst in ep.instances.get(event.model, [])
                if inst.is_live
            ]
            if candidates:
                self.inject_failure(candidates[0])
            else:
                logger.warning("fault at t=%s: no live instance of %s to fail",
                               event.at, event.model)

    async def stop(self) -> None:
        self._running = False
        for t in self._bg:
            t.cancel()
        for t in self._bg:
            try:
                await t
            except asyncio.CancelledError:
                pass
        self._bg = []
        # Resolve everything still in flight so no caller hangs.
        for ep in self.endpoints.values():
            for refs in ep.pending.values():
                while refs:
                    refs.popleft().resolve_err(EndpointDown("fabric stopped"))
            for insts in ep.instances.values():
                for inst in insts:
                    while inst.pinned_pending:
                        inst.pinned_pending.popleft().resolve_err(EndpointDown("fabric stopped"))
                    for ref in list(inst.active_refs):
                        ref.detached = True
                        if ref.attempt_task is not None:
                            ref.attempt_task.cancel()
                        ref.resolve_err(EndpointDown("fabric stopped"))
                    inst.active_refs.clear()
                    inst.in_flight = 0
                    if inst.load_task is not None and not inst.load_task.done():
                        inst.load_task.cancel()
                    waiters, inst._state_waiters = inst._state_waiters, []
                    for fut in waiters:
                        if not fut.done():
                            fut.set_result(None)

    async def _tick_loop(self, interval: float, fn: Callable[[], None]) -> None:
        while True:
            await asyncio.sleep(interval)
            fn()

    # ------------------------------------------------------------------ #
    # events
    # ------------------------------------------------------------------ #

    def add_listener(self, cb: Callable[[dict], None]) -> None:
        self._listeners.append(cb)

    def _emit(self, event: str, **fields: Any) -> None:
        if not self._listeners:
            return
        record = {"event": event, "at": now(), **fields}
        for cb in self._listeners:
            cb(record)

    # ------------------------------------------------------------------ #
    # probes
    # ------------------------------------------------------------------ #

    def cluster_status(self, cluster_id: str) -> ClusterStatus:
        cluster = self.clusters.get(cluster_id)
        if cluster is None:
            raise UnknownCluster(f"unknown cluster {cluster_id!r}")
        self.status_queries += 1
        return ClusterStatus(
            cluster_id=cluster_id,
            total_nodes=cluster.total_nodes,
            free_nodes=cluster.free_node_count,
            queued_jobs=len(cluster.queue),
            gpus_per_node=cluster.cfg.gpus_per_node,
            observed_at=now(),
        )

    def instance_states(self, model: str) -> dict[str, list[str]]:
        """endpoint_id -> live shared-instance states for the model."""
        out: dict[str, list[str]] = {}
        for ep_id, ep in self.endpoints.items():
            states = [i.state.value for i in ep.shared_live(model)]
            if states:
                out[ep_id] = states
        return out

    def jobs_snapshot(self) -> list[dict]:
        rows = []
        for ep_id, ep in self.endpoints.items():
            for model, insts in ep.instances.items():
                live = [i for i in insts if i.is_live]
                if not live:
                    continue
                best = InstanceState.QUEUED
                for i in live:
                    if i.state is InstanceState.RUNNING:
                        best = InstanceState.RUNNING
                        break
                    if i.state is InstanceState.STARTING:
                        best = InstanceState.STARTING
                rows.append({
                    "model": model,
                    "endpoint": ep_id,
                    "state": best.value,
                    "instances": len(live),
                    "detail": [
                        {
                            "instance_id": i.instance_id,
                            "state": i.state.value,
                            "nodes": i.nodes(),
                            "gpus": len(i.gpus),
                            "in_flight": i.in_flight,
                            "last_active_at": i.last_active_at,
                            "dedicated": i.dedicated,
                            "cold_start": i.cold_start_segments() or None,
                        }
                        for i in live
                    ],
                    "last_active_at": max(i.last_active_at for i in live),
                })
        return rows

    def pending_depth(self) -> int:
        total = 0
        for ep in self.endpoints.values():
            total += sum(len(q) for q in ep.pending.values())
            for insts in ep.instances.values():
                total += sum(len(i.pinned_pending) for i in insts)
        return total

    # ------------------------------------------------------------------ #
    # instance management
    # ------------------------------------------------------------------ #

    def ensure_instance(self, model: str, endpoint_id: str) -> ModelInstance:
        """Return a live instance with spare capacity, creating one if needed."""
        ep = self._endpoint(endpoint_id)
        live = ep.shared_live(model)
        cap = ep.cfg.max_parallel_per_instance
        for inst in live:
            if inst.in_flight < cap:
                return inst
        if len(live) < ep.cfg.max_instances_per_model:
            return self._create_instance(ep, model)
        if self.cfg.queue_when_saturated and live:
            return min(live, key=lambda i: i.in_flight)
        raise CapacityExceeded(
            f"{model} on {endpoint_id}: {len(live)} instances saturated and queueing disabled"
        )

    def create_dedicated_instance(self, model: str, endpoint_id: str) -> ModelInstance:
        """Fresh instance for a batch job; never shared with online traffic."""
        ep = self._endpoint(endpoint_id)
        return self._create_instance(ep, model, dedicated=True)

    def prewarm(self, model: str, endpoint_id: str, count: int = 1) -> list[ModelInstance]:
        """Force-create shared instances (await wait_running to see them hot)."""
        ep = self._endpoint(endpoint_id)
        return [self._create_instance(ep, model) for _ in range(count)]

    def _create_instance(self, ep: EndpointRuntime, model: str, dedicated: bool = False) -> ModelInstance:
        mcfg = self._model_lookup(model)
        self._instance_seq += 1
        inst = ModelInstance(
            instance_id=f"{model}@{ep.cfg.endpoint_id}#{self._instance_seq}",
            model=model,
            endpoint_id=ep.cfg.endpoint_id,
            gpus_required=mcfg.gpus_required,
            dedicated=dedicated,
        )
        ep.instances.setdefault(model, []).append(inst)
        self._submit_allocation(ep, inst)
        return inst

    def _submit_allocation(self, ep: EndpointRuntime, inst: ModelInstance) -> None:
        self.allocation_jobs_submitted += 1
        self._emit("instance_queued", instance=inst.instance_id, model=inst.model,
                   endpoint=inst.endpoint_id)
        ep.cluster.submit(AllocationJob(instance=inst, gpus_required=inst.gpus_required,
                                        submitted_at=now()))

    def _on_allocated(self, job: AllocationJob) -> None:
        inst = job.instance
        inst.allocated_at = now()
        inst.set_state(InstanceState.STARTING)
        self._emit("alloc_grant", instance=inst.instance_id, gpus=list(inst.gpus))
        inst.load_task = asyncio.ensure_future(self._load_instance(inst))

    async def _load_instance(self, inst: ModelInstance) -> None:
        ep = self.endpoints[inst.endpoint_id]
        delay = ep.cluster.cfg.alloc_delay_s
        if delay > 0:
            await asyncio.sleep(delay)
        if inst.state is not InstanceState.STARTING:
            return
        inst.loading_started_at = now()
        mcfg = self._model_lookup(inst.model)
        vram_total = sum(ep.cluster.nodes[nid].vram_per_gpu for nid, _ in inst.gpus)
        if mcfg.weight_bytes > vram_total:
            inst.permanent_failure = (
                f"weights need {mcfg.weight_bytes:.0f} B but assigned GPUs hold {vram_total:.0f} B"
            )
            self._fail_instance(inst, InsufficientVRAM(inst.permanent_failure))
            return
        load_time = self.cfg.load_base_s + mcfg.weight_bytes / self.cfg.load_bandwidth_bytes_s
        self._emit("load_start", instance=inst.instance_id, load_time=load_time)
        await asyncio.sleep(load_time)
        if inst.state is not InstanceState.STARTING:
            return
        inst.set_state(InstanceState.RUNNING)
        inst.running_since = now()
        inst.last_active_at = now()
        self._emit("instance_running", instance=inst.instance_id,
                   **inst.cold_start_segments())
        self._pump(ep, inst.model)
        self._pump_pinned(inst)

    def release_instance(self, inst: ModelInstance) -> None:
        if inst.state is not InstanceState.RUNNING:
            return
        inst.set_state(InstanceState.RELEASED)
        inst.released_at = now()
        ep = self.endpoints[inst.endpoint_id]
        gpus, inst.gpus = inst.gpus, []
        ep.cluster.release(gpus)
        self._emit("instance_released", instance=inst.instance_id)

    def inject_failure(self, inst: ModelInstance) -> None:
        """Fault injection: crash an instance, reclaiming its work for retry."""
        if not inst.is_live:
            return
        self._fail_instance(inst, TaskFailed(f"instance {inst.instance_id} crashed"))

    def abort_instance(self, inst: ModelInstance, reason: str = "aborted") -> None:
        """Tear an instance down for good: release if running, otherwise cancel
        its provisioning; it will not be restarted."""
        if inst.state is InstanceState.RUNNING:
            self.release_instance(inst)
            return
        if inst.is_live:
            inst.permanent_failure = reason
            self._fail_instance(inst, TaskFailed(reason))

    def _fail_instance(self, inst: ModelInstance, cause: Exception) -> None:
        ep = self.endpoints[inst.endpoint_id]
        if inst.state is InstanceState.QUEUED:
            ep.cluster.cancel_job(inst)
        if inst.load_task is not None and not inst.load_task.done():
            # A stale loader waking during a later boot must never fire.
            inst.load_task.cancel()
        inst.set_state(InstanceState.FAILED)
        # Reclaim in-flight work, then free resources, then announce: every
        # emitted event observes a consistent GPU ledger.
        refs = list(inst.active_refs)
        inst.active_refs.clear()
        inst.in_flight = 0
        for ref in refs:
            ref.detached = True
            if ref.attempt_task is not None:
                ref.attempt_task.cancel()
            ref.failures += 1
            if ref.failures > self.cfg.retry_cap or ref.streamed_any:
                ref.resolve_err(TaskFailed(
                    f"task failed after {ref.failures} attempt(s): {cause}"))
            elif ref.pinned_instance is not None:
                ref.pinned_instance.pinned_pending.appendleft(ref)
            else:
                ep.pending_for(inst.model).appendleft(ref)
        gpus, inst.gpus = inst.gpus, []
        if gpus:
            ep.cluster.release(gpus)
        self._emit("instance_failed", instance=inst.instance_id,
                   permanent=inst.permanent_failure is not None)
        if inst.permanent_failure is not None:
            self._retire(ep, inst, cause)

    def _retire(self, ep: EndpointRuntime, inst: ModelInstance, cause: Exception) -> None:
        """Permanent failure: drop the instance; fail stranded shared work if
        the model has no other live instance on this endpoint."""
        ep.instances[inst.model].remove(inst)
        while inst.pinned_pending:
            inst.pinned_pending.popleft().resolve_err(
                TaskFailed(f"dedicated instance unrecoverable: {cause}"))
        if not inst.dedicated and not ep.live(inst.model):
            pend = ep.pending_for(inst.model)
            while pend:
                pend.popleft().resolve_err(
                    TaskFailed(f"model {inst.model} cannot start on {ep.cfg.endpoint_id}: {cause}"))

    # ------------------------------------------------------------------ #
    # periodic maintenance (spec ops; the background loops call these)
    # ------------------------------------------------------------------ #

    def autoscale_tick(self, endpoint_id: str) -> list[str]:
        """Spawn one instance per saturated model with waiting work."""
        ep = self._endpoint(endpoint_id)
        actions = []
        cap = ep.cfg.max_parallel_per_instance
        for model, pend in list(ep.pending.items()):
            if not pend:
                continue
            live = ep.shared_live(model)
            if len(live) >= ep.cfg.max_instances_per_model:
                continue
            if all(i.in_flight >= cap for i in live):
                inst = self._create_instance(ep, model)
                actions.append(inst.instance_id)
                logger.info("autoscale: spawned %s (pending=%d)", inst.instance_id, len(pend))
        return actions

    def _autoscale_all(self) -> None:
        for ep_id in self.endpoints:
            self.autoscale_tick(ep_id)

    def idle_reaper_tick(self, at: float | None = None) -> list[ModelInstance]:
        """Release running instances idle for at least the idle timeout."""
        at = now() if at is None else at
        released = []
        for ep in self.endpoints.values():
            for insts in ep.instances.values():
                for inst in list(insts):
                    if (
                        inst.state is InstanceState.RUNNING
                        and inst.in_flight == 0
                        and not inst.pinned_pending
                        and at - inst.last_active_at >= self.cfg.idle_timeout_s
                    ):
                        self.release_instance(inst)
                        released.append(inst)
        return released

    def _reap_idle(self) -> None:
        self.idle_reaper_tick()

    def health_tick(self) -> list[ModelInstance]:
        """Re-queue transiently failed instances for a fresh allocation."""
        restarted = []
        for ep in self.endpoints.values():
            for insts in ep.instances.values():
                for inst in list(insts):
                    if inst.state is InstanceState.FAILED and inst.permanent_failure is None:
                        inst.set_state(InstanceState.QUEUED)
                        inst.submitted_at = now()
                        inst.allocated_at = None
                        inst.loading_started_at = None
                        inst.running_since = None
                        self._submit_allocation(ep, inst)
                        restarted.append(inst)
        return restarted

    # ------------------------------------------------------------------ #
    # dispatch & execution
    # ------------------------------------------------------------------ #

    def submit(self, task: InferenceTask, endpoint_id: str) -> TaskRef:
        """Enqueue a task on an endpoint; returns its completion handle."""
        if not self._running:
            raise EndpointDown("fabric is not running")
        ep = self._endpoint(endpoint_id)
        if task.function_name not in ep.cfg.registered_functions:
            raise UnregisteredFunction(
                f"function {task.function_name!r} is not registered on {endpoint_id}")
        task.dispatched_at = now()
        task.endpoint_id = endpoint_id
        ref = TaskRef(task, stream=task.stream)
        self.ensure_instance(task.model, endpoint_id)
        ep.pending_for(task.model).append(ref)
        self._emit("task_submitted", task=task.task_id, model=task.model, endpoint=endpoint_id)
        self._pump(ep, task.model)
        return ref

    def submit_pinned(self, task: InferenceTask, inst: ModelInstance) -> TaskRef:
        """Enqueue a task bound to one specific (batch) instance."""
        if not self._running:
            raise EndpointDown("fabric is not running")
        task.dispatched_at = now()
        task.endpoint_id = inst.endpoint_id
        ref = TaskRef(task, stream=task.stream)
        ref.pinned_instance = inst
        inst.pinned_pending.append(ref)
        self._pump_pinned(inst)
        return ref

    async def wait_running(self, inst: ModelInstance) -> None:
        """Block until the instance serves, or raise if it never will."""
        while inst.state is not InstanceState.RUNNING:
            if inst.permanent_failure is not None:
                raise InsufficientVRAM(inst.permanent_failure)
            if inst.state is InstanceState.RELEASED:
                raise TaskFailed(f"instance {inst.instance_id} was released")
            if not self._running:
                raise EndpointDown("fabric is not running")
            await inst.wait_state_change()

    def _endpoint(self, endpoint_id: str) -> EndpointRuntime:
        ep = self.endpoints.get(endpoint_id)
        if ep is None:
            raise NoEndpoint(f"unknown endpoint {endpoint_id!r}")
        return ep

    def _pick_instance(self, ep: EndpointRuntime, model: str) -> ModelInstance | None:
        """Least-in-flight running shared instance with spare capacity."""
        cap = ep.cfg.max_parallel_per_instance
        best = None
        for inst in ep.instances.get(model, []):
            if inst.dedicated or inst.state is not InstanceState.RUNNING:
                continue
            if inst.in_flight >= cap:
                continue
            if best is None or inst.in_flight < best.in_flight:
                best = inst
        return best

    def _pump(self, ep: EndpointRuntime, model: str) -> None:
        if not self._running:
            return
        pend = ep.pending.get(model)
        if not pend:
            return
        while pend:
            inst = self._pick_instance(ep, model)
            if inst is None:
                return
            self._begin(ep, inst, pend.popleft())

    def _pump_pinned(self, inst: ModelInstance) -> None:
        if not self._running:
            return
        ep = self.endpoints[inst.endpoint_id]
        cap = ep.cfg.max_parallel_per_instance
        while inst.pinned_pending and inst.state is InstanceState.RUNNING and inst.in_flight < cap:
            self._begin(ep, inst, inst.pinned_pending.popleft())

    def _begin(self, ep: EndpointRuntime, inst: ModelInstance, ref: TaskRef) -> None:
        inst.in_flight += 1  # reserve synchronously so the cap cannot be raced
        inst.active_refs.add(ref)
        ref.detached = False
        ref.task.instance_id = inst.instance_id
        self._emit("task_assigned", task=ref.task.task_id, instance=inst.instance_id,
                   in_flight=inst.in_flight)
        ref.attempt_task = asyncio.ensure_future(self.execute(inst, ref))

    async def execute(self, inst: ModelInstance, ref: TaskRef) -> None:
        """Run one task attempt on a running instance."""
        ep = self.endpoints[inst.endpoint_id]
        task = ref.task
        try:
            if task.function_name not in ep.cfg.registered_functions:
                raise UnregisteredFunction(
                    f"function {task.function_name!r} is not registered on {inst.endpoint_id}")
            result = await self._invoke_backend(inst, ref)
            ref.resolve_ok(result)
            self._emit("task_completed", task=task.task_id, instance=inst.instance_id)
        except asyncio.CancelledError:
            # Crashed instance or shutdown reclaimed this attempt.
            return
        except Exception as exc:
            ref.resolve_err(exc if isinstance(exc, FedgateError) else TaskFailed(str(exc)))
            self._emit("task_errored", task=task.task_id, error=str(exc))
        finally:
            if not ref.detached:
                inst.in_flight -= 1
                inst.last_active_at = now()
                inst.active_refs.discard(ref)
                self._pump(ep, task.model)
                self._pump_pinned(inst)

    async def _invoke_backend(self, inst: ModelInstance, ref: TaskRef) -> InferenceResult:
        task = ref.task
        mcfg = self._model_lookup(task.model)
        backend = self._backend(task.model, mcfg)
        if isinstance(backend, PassthroughBackend):
            return await self._invoke_passthrough(backend, ref)
        if task.kind == "embedding":
            inputs = task.payload["input"]
            if isinstance(inputs, str):
                inputs = [inputs]
            if mcfg.per_request_overhead_s > 0:
                await asyncio.sleep(mcfg.per_request_overhead_s)
            vectors = backend.embed(inputs)
            return InferenceResult(
                task_id=task.task_id,
                prompt_tokens=prompt_token_count(task.payload),
                completion_tokens=0,
                finish_reason="stop",
                embeddings=vectors,
            )
        parts: list[str] = []
        max_tokens = int(task.payload.get("max_tokens") or mcfg.default_target_tokens)
        async for token in backend.generate(task.payload, load=lambda: inst.in_flight):
            parts.append(token)
            if ref.stream_q is not None:
                ref.streamed_any = True
                ref.stream_q.put_nowait(("token", token))
        n = len(parts)
        return InferenceResult(
            task_id=task.task_id,
            prompt_tokens=prompt_token_count(task.payload),
            completion_tokens=n,
            finish_reason="length" if n >= max_tokens else "stop",
            output_text="".join(parts),
        )

    async def _invoke_passthrough(self, backend: PassthroughBackend, ref: TaskRef) -> InferenceResult:
        task = ref.task
        path = {
            "chat": "/v1/chat/completions",
            "completion": "/v1/completions",
            "embedding": "/v1/embeddings",
        }[task.kind]
        if ref.stream_q is not None:
            async for chunk in backend.stream(path, task.payload):
                ref.streamed_any = True
                ref.stream_q.put_nowait(("raw", chunk))
            return InferenceResult(task_id=task.task_id, raw_response=None)
        body = await backend.call(path, task.payload)
        usage = body.get("usage", {}) if isinstance(body, dict) else {}
        return InferenceResult(
            task_id=task.task_id,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            finish_reason="stop",
            raw_response=body,
        )

    def _backend(self, model: str, mcfg: ModelConfig):
        backend = self._backends.get(model)
        if backend is None:
            if mcfg.backend == "passthrough":
                client = None
                if self.passthrough_client_factory is not None:
                    client = self.passthrough_client_factory(mcfg.passthrough_base_url)
                backend = PassthroughBackend(mcfg.passthrough_base_url, client=client)
            else:
                backend = MockBackend(mcfg, seed=self.seed)
            self._backends[model] = backend
        return backend

    def backend_tokens_emitted(self) -> int:
        return sum(
            b.tokens_emitted for b in self._backends.values() if isinstance(b, MockBackend)
        )
