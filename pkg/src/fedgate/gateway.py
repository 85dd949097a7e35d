"""OpenAI-compatible HTTP gateway.

Request pipeline: authenticate (401) -> parse and validate (422) -> resolve
model (404) -> authorize (403) -> rate limit (429) -> backpressure (503) ->
dispatch to the federation router and await the completion handle. Responses
are OpenAI-shaped JSON, or SSE delta chunks terminated by ``data: [DONE]``
when ``stream`` is set. Every dispatched task lands in telemetry with its
arrival/dispatch/completion timestamps.
"""

from __future__ import annotations

import json
import logging
from typing import Any, AsyncIterator

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response, StreamingResponse

from .auth import Principal, require_access
from .errors import (
    FedgateError,
    InvalidToken,
    Overloaded,
    PermissionDenied,
    RateLimited,
    UnknownModel,
    ValidationError,
)
from .simclock import now
from .tasks import InferenceResult, InferenceTask, make_id
from .telemetry import UsageRecord

logger = logging.getLogger(__name__)

_KIND_PATHS = {"chat": "/v1/chat/completions", "completion": "/v1/completions"}


def error_body(exc: FedgateError) -> dict:
    body: dict[str, Any] = {
        "error": {
            "message": exc.message,
            "type": exc.error_type,
            "code": exc.http_status,
        }
    }
    if isinstance(exc, ValidationError) and exc.lines:
        body["error"]["lines"] = exc.lines
    return body


# --------------------------------------------------------------------------- #
# request validation
# --------------------------------------------------------------------------- #

def validate_chat(body: Any) -> dict:
    if not isinstance(body, dict):
        raise ValidationError("request body must be a JSON object")
    model = body.get("model")
    if not isinstance(model, str) or not model:
        raise ValidationError("'model' is required")
    messages = body.get("messages")
    if not isinstance(messages, list) or not messages:
        raise ValidationError("'messages' must be a non-empty array")
    for i, msg in enumerate(messages):
        if not isinstance(msg, dict) or "role" not in msg:
            raise ValidationError(f"messages[{i}] must be an object with a 'role'")
    payload = {"model": model, "messages": messages}
    _validate_sampling(body, payload)
    return payload


def validate_completion(body: Any) -> dict:
    if not isinstance(body, dict):
        raise ValidationError("request body must be a JSON object")
    model = body.get("model")
    if not isinstance(model, str) or not model:
        raise ValidationError("'model' is required")
    prompt = body.get("prompt")
    if not isinstance(prompt, str) or not prompt:
        raise ValidationError("'prompt' must be a non-empty string")
    payload = {"model": model, "prompt": prompt}
    _validate_sampling(body, payload)
    return payload


def validate_embedding(body: Any) -> dict:
    if not isinstance(body, dict):
        raise ValidationError("request body must be a JSON object")
    model = body.get("model")
    if not isinstance(model, str) or not model:
        raise ValidationError("'model' is required")
    inputs = body.get("input")
    if isinstance(inputs, str):
        if not inputs:
            raise ValidationError("'input' must not be empty")
    elif isinstance(inputs, list):
        if not inputs or not all(isinstance(x, str) for x in inputs):
            raise ValidationError("'input' must be a non-empty array of strings")
    else:
        raise ValidationError("'input' must be a string or an array of strings")
    return {"model": model, "input": inputs}


def _validate_sampling(body: dict, payload: dict) -> None:
    if "max_tokens" in body and body["max_tokens"] is not None:
        mt = body["max_tokens"]
        if not isinstance(mt, int) or isinstance(mt, bool) or mt < 1:
            raise ValidationError("'max_tokens' must be an integer >= 1")
        payload["max_tokens"] = mt
    if "temperature" in body and body["temperature"] is not None:
        temp = body["temperature"]
        if not isinstance(temp, (int, float)) or isinstance(temp, bool) or not 0 <= temp <= 2:
            raise ValidationError("'temperature' must be a number in [0, 2]")
        payload["temperature"] = float(temp)
    if "stream" in body and body["stream"] is not None:
        if not isinstance(body["stream"], bool):
            raise ValidationError("'stream' must be a boolean")
        payload["stream"] = body["stream"]
    if "target_tokens" in body and body["target_tokens"] is not None:
        tt = body["target_tokens"]
        if not isinstance(tt, int) or isinstance(tt, bool) or tt < 1:
            raise ValidationError("'target_tokens' must be an integer >= 1")
        payload["target_tokens"] = tt
    if "seed" in body and body["seed"] is not None:
        payload["seed"] = body["seed"]


# --------------------------------------------------------------------------- #
# response shaping
# --------------------------------------------------------------------------- #

def _usage(result: InferenceResult) -> dict:
    return {
        "prompt_tokens": result.prompt_tokens,
        "completion_tokens": result.completion_tokens,
        "total_tokens": result.total_tokens,
    }


def chat_response(task: InferenceTask, result: InferenceResult) -> dict:
    if result.raw_response is not None:
        return result.raw_response
    return {
        "id": make_id("chatcmpl"),
        "object": "chat.completion",
        "created": int(now()),
        "model": task.model,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": result.output_text or ""},
            "finish_reason": result.finish_reason,
        }],
        "usage": _usage(result),
    }


def completion_response(task: InferenceTask, result: InferenceResult) -> dict:
    if result.raw_response is not None:
        return result.raw_response
    return {
        "id": make_id("cmpl"),
        "object": "text_completion",
        "created": int(now()),
        "model": task.model,
        "choices": [{
            "index": 0,
            "text": result.output_text or "",
            "finish_reason": result.finish_reason,
        }],
        "usage": _usage(result),
    }


def embedding_response(task: InferenceTask, result: InferenceResult) -> dict:
    if result.raw_response is not None:
        return result.raw_response
    return {
        "object": "list",
        "model": task.model,
        "data": [
            {"object": "embedding", "index": i, "embedding": vec}
            for i, vec in enumerate(result.embeddings or [])
        ],
        "usage": {
            "prompt_tokens": result.prompt_tokens,
            "total_tokens": result.prompt_tokens,
        },
    }


def _chat_chunk(chunk_id: str, model: str, token: str, first: bool,
                finish_reason: str | None) -> dict:
    delta: dict[str, Any] = {"content": token}
    if first:
        delta["role"] = "assistant"
    return {
        "id": chunk_id,
        "object": "chat.completion.chunk",
        "created": int(now()),
        "model": model,
        "choices": [{"index": 0, "delta": delta, "finish_reason": finish_reason}],
    }


def _completion_chunk(chunk_id: str, model: str, token: str,
                      finish_reason: str | None) -> dict:
    return {
        "id": chunk_id,
        "object": "text_completion",
        "created": int(now()),
        "model": model,
        "choices": [{"index": 0, "text": token, "finish_reason": finish_reason}],
    }


# --------------------------------------------------------------------------- #
# app factory
# --------------------------------------------------------------------------- #

def build_app(stack) -> FastAPI:
    """Assemble the gateway routes around a ServiceStack."""
    app = FastAPI(title="fedgate", docs_url=None, redoc_url=None)
    gw_cfg = stack.config.gateway
    # the web console is served from its own origin
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    @app.exception_handler(FedgateError)
    async def _fedgate_error(_request: Request, exc: FedgateError) -> JSONResponse:
        headers = {}
        if isinstance(exc, RateLimited):
            headers["Retry-After"] = str(max(1, int(exc.retry_after + 0.999)))
        return JSONResponse(error_body(exc), status_code=exc.http_status, headers=headers)

    async def authenticate(request: Request) -> Principal:
        auth = request.headers.get("authorization", "")
        if not auth.lower().startswith("bearer "):
            raise InvalidToken("missing bearer token")
        return await stack.introspector.introspect(auth.split(" ", 1)[1].strip())

    def check_rate_limit(principal: Principal) -> None:
        allowed, retry_after = stack.limiter.check(principal.subject)
        if not allowed:
            raise RateLimited("rate limit exceeded", retry_after=retry_after)

    async def read_json(request: Request) -> Any:
        try:
            return json.loads(await request.body())
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ValidationError(f"body is not valid JSON: {exc}") from exc

    def admission(principal: Principal, model: str, payload: dict, kind: str) -> None:
        """Model resolution, policy, semantic limits, rate limit, backpressure."""
        entry = stack.registry.get(model)  # raises UnknownModel -> 404
        require_access(principal, model, stack.policy)
        mcfg = entry.config
        if kind == "embedding" and mcfg.embedding_dim is None:
            raise ValidationError(f"model {model!r} does not serve embeddings")
        if payload.get("max_tokens", 0) > mcfg.max_output_tokens:
            raise ValidationError(
                f"'max_tokens' exceeds the model limit of {mcfg.max_output_tokens}")
        check_rate_limit(principal)
        if stack.pending_tasks >= gw_cfg.max_pending_tasks:
            raise Overloaded(
                f"gateway is holding {stack.pending_tasks} pending tasks; retry later")

    def record_usage(task: InferenceTask, result: InferenceResult | None,
                     outcome: str) -> None:
        stack.telemetry.record(UsageRecord(
            task_id=task.task_id,
            subject=task.principal_subject,
            model=task.model,
            endpoint=task.endpoint_id or "-",
            kind=task.kind,
            prompt_tokens=result.prompt_tokens if result else 0,
            completion_tokens=result.completion_tokens if result else 0,
            arrived_at=task.arrived_at,
            dispatched_at=task.dispatched_at or task.arrived_at,
            completed_at=task.completed_at or now(),
            outcome=outcome,
        ))

    async def run_task(task: InferenceTask) -> InferenceResult:
        stack.pending_tasks += 1
        try:
            ref = stack.router.dispatch(task)
            result = await ref.result()
        except FedgateError as exc:
            record_usage(task, None, str(exc.http_status))
            raise
        else:
            record_usage(task, result, "ok")
            return result
        finally:
            stack.pending_tasks -= 1

    def stream_response(task: InferenceTask, kind: str) -> StreamingResponse:
        chunk_id = make_id("chatcmpl" if kind == "chat" else "cmpl")

        async def gen() -> AsyncIterator[str]:
            stack.pending_tasks += 1
            outcome = "ok"
            result: InferenceResult | None = None
            try:
                try:
                    ref = stack.router.dispatch(task)
                except FedgateError as exc:
                    outcome = str(exc.http_status)
                    yield f"data: {json.dumps(error_body(exc))}\n\n"
                    yield "data: [DONE]\n\n"
                    return
                assert ref.stream_q is not None
                pending_token: str | None = None
                first = True
                raw_relay = False
                while True:
                    event, item = await ref.stream_q.get()
                    if event == "raw":  # passthrough relay, verbatim
                        raw_relay = True
                        data = item.decode() if isinstance(item, bytes) else str(item)
                        yield data
                        continue
                    if event == "token":
                        if pending_token is not None:
                            body = (_chat_chunk(chunk_id, task.model, pending_token, first, None)
                                    if kind == "chat" else
                                    _completion_chunk(chunk_id, task.model, pending_token, None))
                            first = False
                            yield f"data: {json.dumps(body)}\n\n"
                        pending_token = item
                        continue
                    if event == "done":
                        result = item
                        if raw_relay:
                            return  # the upstream bytes carry their own [DONE]
                        if pending_token is not None:
                            body = (_chat_chunk(chunk_id, task.model, pending_token, first,
                                                result.finish_reason)
                                    if kind == "chat" else
                                    _completion_chunk(chunk_id, task.model, pending_token,
                                                      result.finish_reason))
                            yield f"data: {json.dumps(body)}\n\n"
                        yield "data: [DONE]\n\n"
                        return
                    if event == "error":
                        exc = item
                        outcome = str(getattr(exc, "http_status", 502))
                        if isinstance(exc, FedgateError):
                            yield f"data: {json.dumps(error_body(exc))}\n\n"
                        yield "data: [DONE]\n\n"
                        return
            finally:
                stack.pending_tasks -= 1
                record_usage(task, result, outcome)

        return StreamingResponse(gen(), media_type="text/event-stream")

    # ------------------------------------------------------------------ #
    # inference routes
    # ------------------------------------------------------------------ #

    @app.post("/v1/chat/completions")
    async def chat_completions(request: Request):
        principal = await authenticate(request)
        payload = validate_chat(await read_json(request))
        admission(principal, payload["model"], payload, "chat")
        task = InferenceTask.create(
            "chat", payload["model"], payload, principal.subject,
            stream=bool(payload.get("stream")),
        )
        if task.stream:
            return stream_response(task, "chat")
        result = await run_task(task)
        return JSONResponse(chat_response(task, result))

    @app.post("/v1/completions")
    async def completions(request: Request):
        principal = await authenticate(request)
        payload = validate_completion(await read_json(request))
        admission(principal, payload["model"], payload, "completion")
        task = InferenceTask.create(
            "completion", payload["model"], payload, principal.subject,
            stream=bool(payload.get("stream")),
        )
        if task.stream:
            return stream_response(task, "completion")
        result = await run_task(task)
        return JSONResponse(completion_response(task, result))

    @app.post("/v1/embeddings")
    async def embeddings(request: Request):
        principal = await authenticate(request)
        payload = validate_embedding(await read_json(request))
        admission(principal, payload["model"], payload, "embedding")
        task = InferenceTask.create("embedding", payload["model"], payload, principal.subject)
        result = await run_task(task)
        return JSONResponse(embedding_response(task, result))

    # ------------------------------------------------------------------ #
    # registry, status, metrics
    # ------------------------------------------------------------------ #

    @app.get("/v1/models")
    async def list_models(request: Request):
        await authenticate(request)
        return {
            "object": "list",
            "data": [
                {"id": name, "object": "model", "created": 0, "owned_by": "fedgate"}
                for name in stack.registry.names()
            ],
        }

    @app.get("/jobs")
    async def jobs(request: Request):
        await authenticate(request)
        rows = stack.fabric.jobs_snapshot()
        if gw_cfg.show_stopped_models:
            active = {r["model"] for r in rows}
            for name in stack.registry.names():
                if name not in active:
                    rows.append({"model": name, "endpoint": None, "state": "stopped",
                                 "instances": 0, "detail": [], "last_active_at": None})
        return {"jobs": rows}

    @app.get("/metrics")
    async def metrics(request: Request):
        await authenticate(request)
        snap = stack.telemetry.snapshot()
        snap["models"] = {
            row["model"]: {row["endpoint"]: row["state"]}
            for row in stack.fabric.jobs_snapshot()
        }
        snap["queue_depth"] = {
            "gateway_pending": stack.pending_tasks,
            "fabric_pending": stack.fabric.pending_depth(),
            "scheduler_queues": {
                cid: len(c.queue) for cid, c in stack.fabric.clusters.items()
            },
        }
        return snap

    @app.post("/admin/models")
    async def admin_register_model(request: Request):
        principal = await authenticate(request)
        admin_group = stack.config.auth.admin_group
        if admin_group not in principal.groups:
            raise PermissionDenied(f"registering models requires group {admin_group!r}")
        body = await read_json(request)
        if not isinstance(body, dict):
            raise ValidationError("body must be a model definition object")
        name = stack.register_model_dict(body)
        return JSONResponse({"registered": name}, status_code=201)

    # ------------------------------------------------------------------ #
    # batch routes
    # ------------------------------------------------------------------ #

    @app.post("/v1/batches")
    async def submit_batch(request: Request):
        principal = await authenticate(request)
        model = request.query_params.get("model", "")
        if not model:
            raise ValidationError("query parameter 'model' is required")
        if not stack.registry.has(model):
            raise UnknownModel(f"model {model!r} is not registered")
        require_access(principal, model, stack.policy)
        data = await request.body()
        job = stack.batch_engine.submit(principal, data, model)
        return JSONResponse(job.to_api(), status_code=201)

    @app.get("/v1/batches/{batch_id}")
    async def batch_status(request: Request, batch_id: str):
        principal = await authenticate(request)
        job = stack.batch_engine.get(batch_id, principal, stack.config.auth.admin_group)
        return job.to_api()

    @app.get("/v1/batches/{batch_id}/output")
    async def batch_output(request: Request, batch_id: str):
        principal = await authenticate(request)
        job = stack.batch_engine.get(batch_id, principal, stack.config.auth.admin_group)
        content = stack.batch_engine.read_output(job)
        return Response(content, media_type="application/x-ndjson")

    @app.post("/v1/batches/{batch_id}/cancel")
    async def batch_cancel(request: Request, batch_id: str):
        principal = await authenticate(request)
        job = stack.batch_engine.get(batch_id, principal, stack.config.auth.admin_group)
        await stack.batch_engine.cancel(job)
        return job.to_api()

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "time": now()}

    return app
