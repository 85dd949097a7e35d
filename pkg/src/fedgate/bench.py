"""Load generator and report writer.

Drives the gateway with a fixed number of requests at a controlled request
rate (Poisson-spaced) or an "infinite" rate (everything submitted up front,
bounded by a client-side connection pool), measures send-to-final-byte
latency per request, and reports four metrics: request throughput, output
token throughput, median end-to-end latency, and benchmark duration.
Throughput counts successful requests only.

Targets are pluggable: a real HTTP URL, or an in-process ASGI app driven by a
minimal client so the harness itself never becomes the bottleneck being
measured.
"""

from __future__ import annotations

import asyncio
import csv
import json
import math
import random
from dataclasses import asdict, dataclass, field
from typing import Any

import httpx

from .simclock import now
from .telemetry import quantile

INFINITE = math.inf


@dataclass
class WorkloadSpec:
    n_requests: int
    model: str
    rate: float = INFINITE  # requests/s; INFINITE submits everything at once
    mode: str = "online"  # online | batch
    kind: str = "chat"  # chat | completion
    seed: int = 0
    prompt_tokens: int = 32
    output_tokens: int = 64
    length_dist: str = "fixed"  # fixed | lognormal
    lognormal_sigma: float = 0.6
    stream: bool = False
    duration_cap_s: float | None = None
    pool_size: int = 512
    max_error_rate: float = 0.05

    def build_requests(self) -> list[dict]:
        """Deterministic request sequence: same seed, same workload."""
        rng = random.Random(self.seed)
        requests = []
        for i in range(self.n_requests):
            if self.length_dist == "lognormal":
                p_len = max(1, int(rng.lognormvariate(
                    math.log(self.prompt_tokens), self.lognormal_sigma)))
                o_len = max(1, int(rng.lognormvariate(
                    math.log(self.output_tokens), self.lognormal_sigma)))
            else:
                p_len, o_len = self.prompt_tokens, self.output_tokens
            prompt = " ".join(f"w{rng.randrange(10_000)}" for _ in range(p_len))
            body: dict[str, Any] = {"model": self.model, "max_tokens": o_len}
            if self.kind == "chat":
                body["messages"] = [{"role": "user", "content": f"req-{i} {prompt}"}]
            else:
                body["prompt"] = f"req-{i} {prompt}"
            if self.stream:
                body["stream"] = True
            requests.append(body)
        return requests

    def schedule(self) -> list[float]:
        """Send offsets from bench start; Poisson gaps at the target rate."""
        if math.isinf(self.rate):
            return [0.0] * self.n_requests
        rng = random.Random(self.seed ^ 0x5EED)
        t = 0.0
        offsets = []
        for _ in range(self.n_requests):
            offsets.append(t)
            t += rng.expovariate(self.rate)
        return offsets


@dataclass
class RequestRecord:
    index: int
    sent_at: float
    completed_at: float
    status: int
    completion_tokens: int
    error: str | None = None

    @property
    def latency_s(self) -> float:
        return self.completed_at - self.sent_at

    @property
    def ok(self) -> bool:
        return self.error is None and 200 <= self.status < 300


@dataclass
class BenchReport:
    n_requests: int
    n_success: int
    n_errors: int
    request_throughput: float
    output_token_throughput: float
    median_e2e_latency_s: float
    duration_s: float
    aborted: bool = False
    records: list[RequestRecord] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        d = asdict(self)
        return d

    def write_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    @staticmethod
    def csv_header() -> list[str]:
        return ["n_requests", "n_success", "n_errors", "request_throughput",
                "output_token_throughput", "median_e2e_latency_s", "duration_s", "aborted"]

    def csv_row(self) -> list:
        return [self.n_requests, self.n_success, self.n_errors,
                round(self.request_throughput, 6), round(self.output_token_throughput, 6),
                round(self.median_e2e_latency_s, 6), round(self.duration_s, 6), self.aborted]


# --------------------------------------------------------------------------- #
# targets
# --------------------------------------------------------------------------- #

class AsgiTarget:
    """Minimal in-process ASGI driver; sub-millisecond per-request overhead."""

    def __init__(self, app):
        self.app = app

    async def _request(self, method: str, path: str, body: bytes | None,
                       headers: list[tuple[bytes, bytes]]) -> tuple[int, bytes]:
        path, _, query = path.partition("?")
        scope = {
            "type": "http",
            "asgi": {"version": "3.0", "spec_version": "2.3"},
            "http_version": "1.1",
            "method": method,
            "scheme": "http",
            "path": path,
            "raw_path": path.encode(),
            "query_string": query.encode(),
            "root_path": "",
            "headers": headers,
            "client": ("bench", 0),
            "server": ("inproc", 80),
            "state": {},
        }
        sent = False

        async def receive():
            nonlocal sent
            if not sent:
                sent = True
                return {"type": "http.request", "body": body or b"",
                        "more_body": False}
            # Never signal a disconnect: streaming responses listen on this
            # channel and would abort mid-stream. The framework cancels the
            # listener once the response completes.
            await asyncio.Event().wait()

        status = 500
        chunks: list[bytes] = []

        async def send(message):
            nonlocal status
            if message["type"] == "http.response.start":
                status = message["status"]
            elif message["type"] == "http.response.body":
                chunks.append(message.get("body", b""))

        await self.app(scope, receive, send)
        return status, b"".join(chunks)

    async def post_json(self, path: str, body: dict, token: str) -> tuple[int, bytes]:
        payload = json.dumps(body).encode()
        return await self._request("POST", path, payload, [
            (b"content-type", b"application/json"),
            (b"content-length", str(len(payload)).encode()),
            (b"authorization", f"Bearer {token}".encode()),
        ])

    async def get_json(self, path: str, token: str) -> tuple[int, bytes]:
        return await self._request("GET", path, None, [
            (b"authorization", f"Bearer {token}".encode()),
        ])

    async def post_raw(self, path: str, data: bytes, token: str) -> tuple[int, bytes]:
        return await self._request("POST", path, data, [
            (b"content-type", b"application/x-ndjson"),
            (b"content-length", str(len(data)).encode()),
            (b"authorization", f"Bearer {token}".encode()),
        ])


class HttpTarget:
    """httpx client against a live gateway URL."""

    def __init__(self, base_url: str, timeout_s: float = 600.0):
        self.base_url = base_url.rstrip("/")
        self._client = httpx.AsyncClient(timeout=timeout_s,
                                         limits=httpx.Limits(max_connections=None))

    async def post_json(self, path: str, body: dict, token: str) -> tuple[int, bytes]:
        r = await self._client.post(self.base_url + path, json=body,
                                    headers={"Authorization": f"Bearer {token}"})
        return r.status_code, r.content

    async def get_json(self, path: str, token: str) -> tuple[int, bytes]:
        r = await self._client.get(self.base_url + path,
                                   headers={"Authorization": f"Bearer {token}"})
        return r.status_code, r.content

    async def post_raw(self, path: str, data: bytes, token: str) -> tuple[int, bytes]:
        r = await self._client.post(
            self.base_url + path, content=data,
            headers={"Authorization": f"Bearer {token}",
                     "Content-Type": "application/x-ndjson"})
        return r.status_code, r.content

    async def aclose(self) -> None:
        await self._client.aclose()


def _completion_tokens_from(body: bytes, streamed: bool) -> int:
    if streamed:
        # one delta chunk per token, then [DONE]
        return sum(1 for line in body.split(b"\n")
                   if line.startswith(b"data: {"))
    try:
        obj = json.loads(body)
        return int(obj.get("usage", {}).get("completion_tokens", 0))
    except (json.JSONDecodeError, AttributeError, TypeError, ValueError):
        return 0


# --------------------------------------------------------------------------- #
# runners
# --------------------------------------------------------------------------- #

async def run_bench(spec: WorkloadSpec, target, token: str) -> BenchReport:
    if spec.mode == "batch":
        return await _run_batch_bench(spec, target, token)
    path = "/v1/chat/completions" if spec.kind == "chat" else "/v1/completions"
    requests = spec.build_requests()
    offsets = spec.schedule()
    pool = asyncio.Semaphore(spec.pool_size)
    records: list[RequestRecord] = [None] * spec.n_requests  # type: ignore[list-item]
    t_start = now()
    errors = 0
    completed = 0
    abort = asyncio.Event()

    async def one(i: int) -> None:
        nonlocal errors, completed
        delay = t_start + offsets[i] - now()
        if delay > 0:
            await asyncio.sleep(delay)
        if abort.is_set():
            records[i] = RequestRecord(i, now(), now(), 0, 0, error="aborted")
            errors += 1
            return
        async with pool:
            sent = now()
            try:
                status, body = await target.post_json(path, requests[i], token)
                tokens = _completion_tokens_from(body, spec.stream) if status == 200 else 0
                records[i] = RequestRecord(i, sent, now(), status, tokens,
                                           error=None if status == 200 else f"http {status}")
            except Exception as exc:  # harness must survive target failures
                records[i] = RequestRecord(i, sent, now(), 0, 0, error=str(exc))
            completed += 1
            if not records[i].ok:
                errors += 1
                if (completed >= 20
                        and errors / completed > spec.max_error_rate
                        and not abort.is_set()):
                    abort.set()

    tasks = [asyncio.ensure_future(one(i)) for i in range(spec.n_requests)]
    if spec.duration_cap_s:
        done, pending = await asyncio.wait(tasks, timeout=spec.duration_cap_s)
        for p in pending:
            p.cancel()
        await asyncio.gather(*pending, return_exceptions=True)
    else:
        await asyncio.gather(*tasks)
    recs = [r for r in records if r is not None]
    return _report(recs, aborted=abort.is_set())


async def _run_batch_bench(spec: WorkloadSpec, target, token: str) -> BenchReport:
    lines = []
    for i, body in enumerate(spec.build_requests()):
        url = "/v1/chat/completions" if spec.kind == "chat" else "/v1/completions"
        lines.append(json.dumps({"custom_id": f"bench-{i}", "url": url, "body": body}))
    data = ("\n".join(lines) + "\n").encode()
    sent = now()
    status, body = await target.post_raw(f"/v1/batches?model={spec.model}", data, token)
    if status != 201:
        rec = RequestRecord(0, sent, now(), status, 0, error=f"http {status}")
        return _report([rec], aborted=True)
    batch = json.loads(body)
    batch_id = batch["id"]
    while True:
        await asyncio.sleep(1.0)
        status, body = await target.get_json(f"/v1/batches/{batch_id}", token)
        snap = json.loads(body)
        if snap["status"] in ("completed", "failed", "cancelled"):
            break
    done_at = now()
    _, out = await target.get_json(f"/v1/batches/{batch_id}/output", token)
    total_tokens = 0
    n_ok = 0
    for line in out.decode().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        if "response" in obj:
            n_ok += 1
            total_tokens += int(obj["response"].get("usage", {})
                                .get("completion_tokens", 0))
    duration = max(done_at - sent, 1e-12)
    n_failed = snap["request_counts"]["failed"]
    return BenchReport(
        n_requests=spec.n_requests,
        n_success=n_ok,
        n_errors=n_failed,
        request_throughput=n_ok / duration,
        output_token_throughput=total_tokens / duration,
        median_e2e_latency_s=duration,  # one job: the batch is the unit of latency
        duration_s=duration,
        records=[RequestRecord(0, sent, done_at, 200, total_tokens)],
    )


def _report(records: list[RequestRecord], aborted: bool = False) -> BenchReport:
    ok = [r for r in records if r.ok]
    if records:
        t0 = min(r.sent_at for r in records)
        t1 = max(r.completed_at for r in records)
    else:
        t0 = t1 = 0.0
    duration = max(t1 - t0, 1e-12)
    latencies = sorted(r.latency_s for r in ok)
    return BenchReport(
        n_requests=len(records),
        n_success=len(ok),
        n_errors=len(records) - len(ok),
        request_throughput=len(ok) / duration,
        output_token_throughput=sum(r.completion_tokens for r in ok) / duration,
        median_e2e_latency_s=quantile(latencies, 0.5),
        duration_s=duration,
        records=records,
        aborted=aborted,
    )


# --------------------------------------------------------------------------- #
# sweeps
# --------------------------------------------------------------------------- #

async def run_sweep(
    config_data: dict,
    spec: WorkloadSpec,
    rates: list[float],
    instance_counts: list[int],
) -> list[dict]:
    """Grid of (rate, instance count) points, each on a fresh in-process stack.

    Instances are pre-warmed so each point measures steady-state capacity
    rather than cold starts. Per-point failures are recorded and the sweep
    continues.
    """
    from .stack import build_stack  # local import: bench is usable standalone

    rows = []
    for count in instance_counts:
        for rate in rates:
            point = {"instances": count, "rate": rate}
            try:
                stack = build_stack(_with_max_instances(config_data, spec.model, count))
                await stack.start()
                try:
                    endpoint_id = stack.registry.get(spec.model).endpoint_ids[0]
                    await prewarm(stack, spec.model, endpoint_id, count)
                    point_spec = WorkloadSpec(**{**asdict_spec(spec), "rate": rate})
                    report = await run_bench(point_spec, AsgiTarget(stack.app), stack.mint())
                    point["report"] = {k: v for k, v in report.to_json().items()
                                       if k != "records"}
                finally:
                    await stack.stop()
            except Exception as exc:
                point["error"] = str(exc)
            rows.append(point)
    return rows


def asdict_spec(spec: WorkloadSpec) -> dict:
    return asdict(spec)


def _with_max_instances(config_data: dict, model: str, count: int) -> dict:
    data = json.loads(json.dumps(config_data))  # deep copy
    for ep in data.get("endpoints", []):
        ep["max_instances_per_model"] = max(count, ep.get("max_instances_per_model", count))
    return data


async def prewarm(stack, model: str, endpoint_id: str, count: int) -> None:
    """Bring ``count`` instances of a model to running before measuring."""
    instances = stack.fabric.prewarm(model, endpoint_id, count)
    for inst in instances:
        await stack.fabric.wait_running(inst)


def write_csv(path: str, reports: list[BenchReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(BenchReport.csv_header())
        for r in reports:
            writer.writerow(r.csv_row())


def write_sweep_csv(path: str, rows: list[dict]) -> None:
    cols = ["instances", "rate", "n_success", "n_errors", "request_throughput",
            "output_token_throughput", "median_e2e_latency_s", "duration_s", "error"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            rep = row.get("report", {})
            writer.writerow([
                row.get("instances"), row.get("rate"),
                rep.get("n_success"), rep.get("n_errors"),
                rep.get("request_throughput"), rep.get("output_token_throughput"),
                rep.get("median_e2e_latency_s"), rep.get("duration_s"),
                row.get("error", ""),
            ])
