"""Shared helpers: virtual-clock runner and stack factories.

Tests are plain (synchronous) pytest functions that hand a coroutine to
``vrun``, which executes it on a fresh virtual-time event loop. Simulated
hours finish in milliseconds and runs are deterministic.
"""

from __future__ import annotations

import contextlib
import copy
from typing import Any, AsyncIterator

import pytest

from fedgate.simclock import run_virtual
from fedgate.stack import ServiceStack, build_stack


def vrun(coro):
    return run_virtual(coro)


BASE_CONFIG: dict[str, Any] = {
    "clusters": [
        {"cluster_id": "sophia", "nodes": 24, "gpus_per_node": 8, "vram_per_gpu_gb": 40},
    ],
    "endpoints": [
        {"endpoint_id": "sophia-ep", "cluster_id": "sophia",
         "max_instances_per_model": 4, "max_parallel_per_instance": 16},
    ],
    "models": [
        {"name": "demo-8b", "params_billions": 8, "gpus_required": 1,
         "service_rate": 200.0, "endpoints": ["sophia-ep"]},
        {"name": "embed-small", "params_billions": 1, "gpus_required": 1,
         "service_rate": 500.0, "embedding_dim": 16, "endpoints": ["sophia-ep"]},
    ],
    # generous limits so unrelated tests never trip the limiter
    "rate_limit": {"capacity": 1e9, "refill_per_s": 1e9},
}


def make_config(**overrides: Any) -> dict:
    cfg = copy.deepcopy(BASE_CONFIG)
    cfg.update(copy.deepcopy(overrides))
    return cfg


@contextlib.asynccontextmanager
async def running_stack(config: dict) -> AsyncIterator[ServiceStack]:
    stack = build_stack(config)
    await stack.start()
    try:
        yield stack
    finally:
        await stack.stop()


@contextlib.asynccontextmanager
async def manual_stack(config: dict) -> AsyncIterator[ServiceStack]:
    """Stack whose fabric accepts work but runs no periodic ticks, so tests
    drive autoscale/reaper/health transitions by hand."""
    stack = build_stack(config)
    await stack.telemetry.start()
    await stack.fabric.start(run_ticks=False)
    try:
        yield stack
    finally:
        await stack.stop()


def attach_conservation_checker(fabric) -> list:
    """Assert the GPU partition and node conservation invariants on every
    fabric event; returns the (growing) event trace."""
    trace: list[dict] = []

    def check(event: dict) -> None:
        trace.append(event)
        assigned: dict[str, dict[int, set[int]]] = {}
        for ep in fabric.endpoints.values():
            cluster_id = ep.cluster.cfg.cluster_id
            for insts in ep.instances.values():
                for inst in insts:
                    for node_id, gpu in inst.gpus:
                        bucket = assigned.setdefault(cluster_id, {}).setdefault(node_id, set())
                        assert gpu not in bucket, f"GPU {gpu} assigned twice on node {node_id}"
                        bucket.add(gpu)
        for cluster_id, cluster in fabric.clusters.items():
            for node in cluster.nodes:
                free = set(node.free_gpus)
                used = assigned.get(cluster_id, {}).get(node.node_id, set())
                assert not (free & used), f"node {node.node_id}: GPU both free and assigned"
                assert free | used == set(range(node.gpu_count)), (
                    f"node {node.node_id}: GPUs leaked ({sorted(free)} + {sorted(used)})")
            free_nodes = cluster.free_node_count
            allocated = sum(
                1 for node in cluster.nodes
                if assigned.get(cluster_id, {}).get(node.node_id))
            assert allocated + free_nodes == cluster.total_nodes

    fabric.add_listener(check)
    return trace


@pytest.fixture
def base_config() -> dict:
    return make_config()
