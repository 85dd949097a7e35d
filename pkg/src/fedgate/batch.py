"""Offline batch processing of JSON Lines request files.

A batch runs as its own dedicated job: the engine requests a fresh instance
that online traffic never shares, streams every line through it with
in-instance parallelism, and releases the allocation when the job finishes
(batch instances do not stay hot). Results are keyed by ``custom_id`` and
appended to an output file as they complete; per-line failures go to an error
file without failing the job.

Line format (one complete request per line):
    {"custom_id": "id-1", "body": {"messages": [...], "max_tokens": 64, ...}}
an optional "url" selects the operation (default /v1/chat/completions).
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

from .auth import Principal
from .config import BatchConfig
from .errors import FedgateError, NotFound, ValidationError
from .fabric import ComputeFabric, ModelInstance
from .gateway import (
    chat_response,
    completion_response,
    embedding_response,
    validate_chat,
    validate_completion,
    validate_embedding,
)
from .router import FederationRouter
from .simclock import now
from .tasks import InferenceTask, make_id

logger = logging.getLogger(__name__)

_URL_KINDS = {
    "/v1/chat/completions": "chat",
    "/v1/completions": "completion",
    "/v1/embeddings": "embedding",
}
_VALIDATORS = {
    "chat": validate_chat,
    "completion": validate_completion,
    "embedding": validate_embedding,
}
_RESPONDERS = {
    "chat": chat_response,
    "completion": completion_response,
    "embedding": embedding_response,
}

_STATUS_ORDER = ["validating", "queued", "in_progress", "completed", "failed", "cancelled"]
_TERMINAL = {"completed", "failed", "cancelled"}


@dataclass
class BatchLine:
    line_no: int
    custom_id: str
    kind: str
    payload: dict


@dataclass
class BatchJob:
    batch_id: str
    subject: str
    model: str
    input_ref: str
    total: int
    status: str = "validating"
    completed: int = 0
    failed: int = 0
    created_at: float = 0.0
    started_at: float | None = None
    finished_at: float | None = None
    output_ref: str | None = None
    error_ref: str | None = None
    cancel_requested: bool = False
    lines: list[BatchLine] = field(default_factory=list, repr=False)
    runner: asyncio.Task | None = field(default=None, repr=False)

    def advance(self, status: str) -> None:
        if _STATUS_ORDER.index(status) < _STATUS_ORDER.index(self.status):
            raise ValueError(f"batch status cannot go {self.status} -> {status}")
        self.status = status

    def to_api(self) -> dict:
        return {
            "id": self.batch_id,
            "object": "batch",
            "model": self.model,
            "status": self.status,
            "input_file_id": self.input_ref,
            "output_url": f"/v1/batches/{self.batch_id}/output" if self.output_ref else None,
            "request_counts": {
                "total": self.total,
                "completed": self.completed,
                "failed": self.failed,
            },
            "created_at": self.created_at,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }


class BatchEngine:
    def __init__(
        self,
        cfg: BatchConfig,
        fabric: ComputeFabric,
        router: FederationRouter,
        store_dir: str,
    ):
        self.cfg = cfg
        self.fabric = fabric
        self.router = router
        self.store_dir = store_dir
        os.makedirs(os.path.join(store_dir, "inputs"), exist_ok=True)
        os.makedirs(os.path.join(store_dir, "outputs"), exist_ok=True)
        self.jobs: dict[str, BatchJob] = {}

    # ------------------------------------------------------------------ #
    # submission
    # ------------------------------------------------------------------ #

    def submit(self, principal: Principal, data: bytes, model: str) -> BatchJob:
        lines = self._validate_file(data, model)
        input_ref = self._persist_input(data)
        job = BatchJob(
            batch_id=make_id("batch"),
            subject=principal.subject,
            model=model,
            input_ref=input_ref,
            total=len(lines),
            created_at=now(),
            lines=lines,
        )
        self.jobs[job.batch_id] = job
        job.advance("queued")
        job.runner = asyncio.ensure_future(self.run_batch(job))
        return job

    def _validate_file(self, data: bytes, model: str) -> list[BatchLine]:
        if not data.strip():
            raise ValidationError("batch input is empty")
        raw_lines = data.decode("utf-8", errors="replace").splitlines()
        parsed: list[BatchLine] = []
        bad: list[int] = []
        problems: list[str] = []
        seen_ids: set[str] = set()
        for i, raw in enumerate(raw_lines, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
                if not isinstance(obj, dict):
                    raise ValueError("line is not a JSON object")
                custom_id = obj.get("custom_id")
                if not isinstance(custom_id, str) or not custom_id:
                    raise ValueError("missing 'custom_id'")
                if custom_id in seen_ids:
                    raise ValueError(f"duplicate custom_id {custom_id!r}")
                url = obj.get("url", "/v1/chat/completions")
                kind = _URL_KINDS.get(url)
                if kind is None:
                    raise ValueError(f"unsupported url {url!r}")
                body = obj.get("body")
                if not isinstance(body, dict):
                    raise ValueError("missing 'body' object")
                body = dict(body)
                line_model = body.setdefault("model", model)
                if line_model != model:
                    raise ValueError(
                        f"line model {line_model!r} does not match batch model {model!r}")
                payload = _VALIDATORS[kind](body)
                seen_ids.add(custom_id)
                parsed.append(BatchLine(line_no=i, custom_id=custom_id, kind=kind,
                                        payload=payload))
            except (ValueError, FedgateError) as exc:
                bad.append(i)
                if len(problems) < 10:
                    problems.append(f"line {i}: {exc}")
        if bad:
            raise ValidationError(
                "invalid batch lines: " + "; ".join(problems), lines=bad)
        if not parsed:
            raise ValidationError("batch input contains zero requests")
        if len(parsed) > self.cfg.max_lines:
            raise ValidationError(
                f"batch has {len(parsed)} lines; limit is {self.cfg.max_lines}")
        return parsed

    def _persist_input(self, data: bytes) -> str:
        digest = hashlib.sha256(data).hexdigest()[:32]
        path = os.path.join(self.store_dir, "inputs", f"{digest}.jsonl")
        if not os.path.exists(path):
            with open(path, "wb") as fh:
                fh.write(data)
        return digest

    # ------------------------------------------------------------------ #
    # execution
    # ------------------------------------------------------------------ #

    def _output_path(self, job: BatchJob) -> str:
        return os.path.join(self.store_dir, "outputs", f"{job.batch_id}.jsonl")

    def _error_path(self, job: BatchJob) -> str:
        return os.path.join(self.store_dir, "outputs", f"{job.batch_id}.errors.jsonl")

    async def run_batch(self, job: BatchJob) -> None:
        instance: ModelInstance | None = None
        try:
            endpoint_id = self.router.select_for_allocation(job.model)
            instance = self.fabric.create_dedicated_instance(job.model, endpoint_id)
            await self.fabric.wait_running(instance)
            if job.cancel_requested:
                self._finish(job, "cancelled")
                return
            job.advance("in_progress")
            job.started_at = now()
            job.output_ref = self._output_path(job)
            parallel = self.fabric.endpoints[endpoint_id].cfg.max_parallel_per_instance
            max_output = self.router.registry.model_config(job.model).max_output_tokens
            line_iter = iter(job.lines)
            out_fh = open(job.output_ref, "a", encoding="utf-8")
            err_fh = None

            def record_error(line: BatchLine, exc: FedgateError) -> None:
                nonlocal err_fh
                job.failed += 1
                if err_fh is None:
                    job.error_ref = self._error_path(job)
                    err_fh = open(job.error_ref, "a", encoding="utf-8")
                err_fh.write(json.dumps({
                    "custom_id": line.custom_id,
                    "error": {"message": exc.message, "type": exc.error_type,
                              "code": exc.http_status},
                }) + "\n")

            async def worker() -> None:
                while not job.cancel_requested:
                    line = next(line_iter, None)
                    if line is None:
                        return
                    if line.payload.get("max_tokens", 0) > max_output:
                        record_error(line, ValidationError(
                            f"'max_tokens' exceeds the model limit of {max_output}"))
                        continue
                    task = InferenceTask.create(
                        line.kind, job.model, line.payload, job.subject)
                    ref = self.fabric.submit_pinned(task, instance)
                    try:
                        result = await ref.result()
                    except FedgateError as exc:
                        record_error(line, exc)
                    else:
                        job.completed += 1
                        out_fh.write(json.dumps({
                            "custom_id": line.custom_id,
                            "response": _RESPONDERS[line.kind](task, result),
                        }) + "\n")

            try:
                await asyncio.gather(*(worker() for _ in range(max(1, parallel))))
            finally:
                out_fh.close()
                if err_fh is not None:
                    err_fh.close()
            self._finish(job, "cancelled" if job.cancel_requested else "completed")
        except asyncio.CancelledError:
            self._finish(job, "cancelled")
            raise
        except FedgateError as exc:
            logger.warning("batch %s failed: %s", job.batch_id, exc)
            self._finish(job, "failed")
        finally:
            if instance is not None:
                self.fabric.abort_instance(instance, reason=f"batch {job.batch_id} finished")

    def _finish(self, job: BatchJob, status: str) -> None:
        if job.status not in _TERMINAL:
            job.advance(status)
            job.finished_at = now()

    # ------------------------------------------------------------------ #
    # status / output / cancel
    # ------------------------------------------------------------------ #

    def get(self, batch_id: str, principal: Principal, admin_group: str) -> BatchJob:
        job = self.jobs.get(batch_id)
        if job is None or (job.subject != principal.subject
                           and admin_group not in principal.groups):
            # same 404 for both: do not leak existence of foreign jobs
            raise NotFound(f"batch {batch_id!r} not found")
        return job

    def read_output(self, job: BatchJob) -> bytes:
        if not job.output_ref or not os.path.exists(job.output_ref):
            return b""
        with open(job.output_ref, "rb") as fh:
            return fh.read()

    async def cancel(self, job: BatchJob) -> None:
        if job.status in _TERMINAL:
            return
        job.cancel_requested = True
        # Cancel work that has not started; running lines finish on their own.
        if job.runner is not None and job.status == "queued":
            job.runner.cancel()
            try:
                await job.runner
            except asyncio.CancelledError:
                pass
