import asyncio
import json

import httpx
import pytest

from conftest import make_config, running_stack, vrun

from fedgate.bench import AsgiTarget
from fedgate.simclock import now


def client_for(stack) -> httpx.AsyncClient:
    return httpx.AsyncClient(transport=httpx.ASGITransport(app=stack.app),
                             base_url="http://gw")


def auth(token: str) -> dict:
    return {"Authorization": f"Bearer {token}"}


CHAT_BODY = {
    "model": "demo-8b",
    "messages": [{"role": "user", "content": "say hello"}],
    "max_tokens": 8,
}


# --------------------------------------------------------------------------- #
# happy paths and response schema
# --------------------------------------------------------------------------- #

def test_chat_completion_schema_and_usage():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                r = await client.post("/v1/chat/completions", json=CHAT_BODY,
                                      headers=auth(stack.mint()))
                assert r.status_code == 200
                body = r.json()
                assert set(body) >= {"id", "object", "created", "model", "choices", "usage"}
                assert body["object"] == "chat.completion"
                assert body["model"] == "demo-8b"
                choice = body["choices"][0]
                assert choice["index"] == 0
                assert choice["message"]["role"] == "assistant"
                assert choice["message"]["content"].strip()
                assert choice["finish_reason"] in ("stop", "length")
                usage = body["usage"]
                assert usage["total_tokens"] == (
                    usage["prompt_tokens"] + usage["completion_tokens"])
                assert usage["completion_tokens"] == 8

    vrun(main())


def test_completion_token_count_matches_configuration():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                r = await client.post(
                    "/v1/completions",
                    json={"model": "demo-8b", "prompt": "hello", "max_tokens": 8},
                    headers=auth(stack.mint()))
                assert r.status_code == 200
                body = r.json()
                assert body["object"] == "text_completion"
                assert len(body["choices"][0]["text"].split()) == 8
                assert body["usage"]["completion_tokens"] == 8

    vrun(main())


def test_embeddings_shape_and_determinism():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                token = stack.mint()
                r = await client.post(
                    "/v1/embeddings",
                    json={"model": "embed-small", "input": ["a", "b", "c"]},
                    headers=auth(token))
                assert r.status_code == 200
                data = r.json()["data"]
                assert len(data) == 3
                assert all(len(d["embedding"]) == 16 for d in data)
                r2 = await client.post(
                    "/v1/embeddings",
                    json={"model": "embed-small", "input": ["a", "b", "c"]},
                    headers=auth(token))
                assert r2.json()["data"] == data

    vrun(main())


def test_models_listing():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                r = await client.get("/v1/models", headers=auth(stack.mint()))
                assert r.status_code == 200
                ids = {m["id"] for m in r.json()["data"]}
                assert ids == {"demo-8b", "embed-small"}

    vrun(main())


# --------------------------------------------------------------------------- #
# streaming
# --------------------------------------------------------------------------- #

async def read_sse(client, path, body, headers):
    lines = []
    async with client.stream("POST", path, json=body, headers=headers) as resp:
        assert resp.status_code == 200
        async for line in resp.aiter_lines():
            if line.startswith("data: "):
                lines.append(line[len("data: "):])
    return lines


def test_chat_stream_one_delta_per_token_then_done():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                lines = await read_sse(client, "/v1/chat/completions",
                                       dict(CHAT_BODY, stream=True),
                                       auth(stack.mint()))
                assert lines[-1] == "[DONE]"
                chunks = [json.loads(x) for x in lines[:-1]]
                assert len(chunks) == 8  # exactly one delta per token
                assert all(c["object"] == "chat.completion.chunk" for c in chunks)
                assert chunks[0]["choices"][0]["delta"]["role"] == "assistant"
                assert all(c["choices"][0]["delta"]["content"] for c in chunks)
                assert chunks[-1]["choices"][0]["finish_reason"] in ("stop", "length")
                assert all(c["choices"][0]["finish_reason"] is None
                           for c in chunks[:-1])

    vrun(main())


def test_stream_text_matches_non_streamed_output():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                token = stack.mint()
                r = await client.post("/v1/chat/completions", json=CHAT_BODY,
                                      headers=auth(token))
                full = r.json()["choices"][0]["message"]["content"]
                lines = await read_sse(client, "/v1/chat/completions",
                                       dict(CHAT_BODY, stream=True), auth(token))
                streamed = "".join(
                    json.loads(x)["choices"][0]["delta"]["content"]
                    for x in lines[:-1])
                assert streamed == full

    vrun(main())


def test_completion_stream_chunk_count():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                body = {"model": "demo-8b", "prompt": "go", "max_tokens": 5,
                        "stream": True}
                lines = await read_sse(client, "/v1/completions", body,
                                       auth(stack.mint()))
                assert len(lines) == 6  # 5 chunks + [DONE]
                assert lines[-1] == "[DONE]"

    vrun(main())


# --------------------------------------------------------------------------- #
# error mapping
# --------------------------------------------------------------------------- #

def test_missing_and_invalid_tokens_401():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                r = await client.post("/v1/chat/completions", json=CHAT_BODY)
                assert r.status_code == 401
                r = await client.post("/v1/chat/completions", json=CHAT_BODY,
                                      headers=auth("bogus"))
                assert r.status_code == 401
                assert r.json()["error"]["type"] == "authentication_error"

    vrun(main())


def test_expired_token_401():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                token = stack.mint(ttl_s=1.0)
                await asyncio.sleep(2.0)
                r = await client.post("/v1/chat/completions", json=CHAT_BODY,
                                      headers=auth(token))
                assert r.status_code == 401

    vrun(main())


def test_group_policy_403():
    async def main():
        cfg = make_config()
        cfg["models"][0]["required_groups"] = ["vip"]
        async with running_stack(cfg) as stack:
            async with client_for(stack) as client:
                r = await client.post("/v1/chat/completions", json=CHAT_BODY,
                                      headers=auth(stack.mint("pleb")))
                assert r.status_code == 403
                r = await client.post("/v1/chat/completions", json=CHAT_BODY,
                                      headers=auth(stack.mint("vip-user", {"vip"})))
                assert r.status_code == 200

    vrun(main())


def test_unknown_model_404():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                r = await client.post(
                    "/v1/chat/completions",
                    json=dict(CHAT_BODY, model="ghost"),
                    headers=auth(stack.mint()))
                assert r.status_code == 404

    vrun(main())


@pytest.mark.parametrize("mutate,path", [
    (lambda b: b.update(max_tokens=0), "/v1/chat/completions"),
    (lambda b: b.update(messages=[]), "/v1/chat/completions"),
    (lambda b: b.pop("model"), "/v1/chat/completions"),
    (lambda b: b.update(temperature=9), "/v1/chat/completions"),
    (lambda b: b.update(stream="yes"), "/v1/chat/completions"),
])
def test_validation_422(mutate, path):
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                body = json.loads(json.dumps(CHAT_BODY))
                mutate(body)
                r = await client.post(path, json=body, headers=auth(stack.mint()))
                assert r.status_code == 422
                assert r.json()["error"]["type"] == "invalid_request_error"

    vrun(main())


def test_empty_prompt_and_empty_input_422():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                token = stack.mint()
                r = await client.post("/v1/completions",
                                      json={"model": "demo-8b", "prompt": ""},
                                      headers=auth(token))
                assert r.status_code == 422
                r = await client.post("/v1/embeddings",
                                      json={"model": "embed-small", "input": []},
                                      headers=auth(token))
                assert r.status_code == 422

    vrun(main())


def test_non_json_body_422():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                r = await client.post("/v1/chat/completions", content=b"not json{",
                                      headers={**auth(stack.mint()),
                                               "Content-Type": "application/json"})
                assert r.status_code == 422

    vrun(main())


def test_max_tokens_above_model_cap_422():
    async def main():
        cfg = make_config()
        cfg["models"][0]["max_output_tokens"] = 100
        async with running_stack(cfg) as stack:
            async with client_for(stack) as client:
                r = await client.post("/v1/chat/completions",
                                      json=dict(CHAT_BODY, max_tokens=101),
                                      headers=auth(stack.mint()))
                assert r.status_code == 422

    vrun(main())


def test_rate_limit_429_with_retry_after():
    async def main():
        # slow refill so the virtual seconds a request takes to serve do not
        # quietly top the bucket back up between calls
        cfg = make_config(rate_limit={"capacity": 3, "refill_per_s": 0.01})
        async with running_stack(cfg) as stack:
            inst = stack.fabric.ensure_instance("demo-8b", "sophia-ep")
            await stack.fabric.wait_running(inst)
            async with client_for(stack) as client:
                token = stack.mint()
                for _ in range(3):
                    r = await client.post("/v1/chat/completions", json=CHAT_BODY,
                                          headers=auth(token))
                    assert r.status_code == 200
                r = await client.post("/v1/chat/completions", json=CHAT_BODY,
                                      headers=auth(token))
                assert r.status_code == 429
                assert int(r.headers["retry-after"]) >= 1
                await asyncio.sleep(100.0)  # one token refilled
                r = await client.post("/v1/chat/completions", json=CHAT_BODY,
                                      headers=auth(token))
                assert r.status_code == 200

    vrun(main())


def test_backpressure_503_beyond_max_pending():
    async def main():
        cfg = make_config(gateway={"max_pending_tasks": 5})
        cfg["models"][0]["service_rate"] = 0.1  # ~4000 s per request: fabric crawls
        async with running_stack(cfg) as stack:
            target = AsgiTarget(stack.app)
            token = stack.mint()
            await target.get_json("/v1/models", token)  # warm the auth cache
            results = await asyncio.gather(*(
                asyncio.ensure_future(wrapped(target, token, i)) for i in range(10)))
            statuses = sorted(s for s, _ in results)
            assert statuses.count(503) == 5
            # tear down while 5 requests still pending: they resolve as 503 too
        return

    async def wrapped(target, token, i):
        async def send():
            return await target.post_json(
                "/v1/completions",
                {"model": "demo-8b", "prompt": f"p{i}", "max_tokens": 400},
                token)
        try:
            return await asyncio.wait_for(send(), timeout=50)
        except asyncio.TimeoutError:
            return (0, b"")

    vrun(main())


# --------------------------------------------------------------------------- #
# concurrency
# --------------------------------------------------------------------------- #

def test_hundred_concurrent_requests_single_instance_cap_16():
    async def main():
        cfg = make_config(endpoints=[{
            "endpoint_id": "sophia-ep", "cluster_id": "sophia",
            "max_instances_per_model": 1, "max_parallel_per_instance": 16}])
        async with running_stack(cfg) as stack:
            peak = 0

            def watch(event):
                nonlocal peak
                if event["event"] == "task_assigned":
                    peak = max(peak, event["in_flight"])

            stack.fabric.add_listener(watch)
            target = AsgiTarget(stack.app)
            token = stack.mint()
            results = await asyncio.gather(*(
                target.post_json("/v1/completions",
                                 {"model": "demo-8b", "prompt": f"q{i}",
                                  "max_tokens": 16},
                                 token)
                for i in range(100)))
            assert all(status == 200 for status, _ in results)
            assert peak <= 16

    vrun(main())


# --------------------------------------------------------------------------- #
# jobs / metrics / admin
# --------------------------------------------------------------------------- #

def test_jobs_walks_queued_starting_running():
    async def main():
        cfg = make_config(
            clusters=[{"cluster_id": "tiny", "nodes": 1, "gpus_per_node": 8}],
            endpoints=[{"endpoint_id": "tiny-ep", "cluster_id": "tiny"}],
            models=[
                {"name": "blocker", "params_billions": 1, "gpus_required": 8,
                 "service_rate": 100.0, "endpoints": ["tiny-ep"]},
                {"name": "m", "params_billions": 8, "gpus_required": 1,
                 "service_rate": 100.0, "endpoints": ["tiny-ep"]},
            ])
        async with running_stack(cfg) as stack:
            async with client_for(stack) as client:
                token = stack.mint()
                blocker = stack.fabric.ensure_instance("blocker", "tiny-ep")
                await stack.fabric.wait_running(blocker)
                inst = stack.fabric.ensure_instance("m", "tiny-ep")

                async def state_of(model):
                    r = await client.get("/jobs", headers=auth(token))
                    rows = {j["model"]: j["state"] for j in r.json()["jobs"]}
                    return rows.get(model)

                assert await state_of("m") == "queued"  # waiting for nodes
                stack.fabric.release_instance(blocker)
                assert await state_of("m") == "starting"  # loading weights
                await stack.fabric.wait_running(inst)
                assert await state_of("m") == "running"

    vrun(main())


def test_jobs_empty_when_idle_and_stopped_flag():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                r = await client.get("/jobs", headers=auth(stack.mint()))
                assert r.json()["jobs"] == []
        cfg = make_config(gateway={"show_stopped_models": True})
        async with running_stack(cfg) as stack:
            async with client_for(stack) as client:
                r = await client.get("/jobs", headers=auth(stack.mint()))
                states = {j["model"]: j["state"] for j in r.json()["jobs"]}
                assert states == {"demo-8b": "stopped", "embed-small": "stopped"}

    vrun(main())


def test_metrics_totals_and_queue_depth():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                token = stack.mint()
                for _ in range(3):
                    await client.post("/v1/chat/completions", json=CHAT_BODY,
                                      headers=auth(token))
                r = await client.get("/metrics", headers=auth(token))
                snap = r.json()
                assert snap["totals"]["requests"] == 3
                assert snap["totals"]["completion_tokens"] == 24
                assert snap["latency"]["p50"] <= snap["latency"]["p90"] <= snap["latency"]["p99"]
                assert snap["queue_depth"]["gateway_pending"] == 0

    vrun(main())


def test_admin_model_registration_group_gated():
    async def main():
        async with running_stack(make_config()) as stack:
            async with client_for(stack) as client:
                new_model = {"name": "registered-live", "params_billions": 2,
                             "gpus_required": 1, "service_rate": 100.0,
                             "endpoints": ["sophia-ep"]}
                r = await client.post("/admin/models", json=new_model,
                                      headers=auth(stack.mint("pleb")))
                assert r.status_code == 403
                r = await client.post("/admin/models", json=new_model,
                                      headers=auth(stack.mint("op", {"admins"})))
                assert r.status_code == 201
                r = await client.get("/v1/models", headers=auth(stack.mint()))
                assert "registered-live" in {m["id"] for m in r.json()["data"]}
                # the new model serves immediately
                r = await client.post(
                    "/v1/completions",
                    json={"model": "registered-live", "prompt": "x", "max_tokens": 3},
                    headers=auth(stack.mint()))
                assert r.status_code == 200
                # duplicate registration rejected
                r = await client.post("/admin/models", json=new_model,
                                      headers=auth(stack.mint("op", {"admins"})))
                assert r.status_code == 409

    vrun(main())


# --------------------------------------------------------------------------- #
# latency accounting
# --------------------------------------------------------------------------- #

def test_telemetry_latency_matches_observed_wall_time():
    async def main():
        async with running_stack(make_config()) as stack:
            target = AsgiTarget(stack.app)
            token = stack.mint()
            sent = now()
            status, _ = await target.post_json("/v1/chat/completions", CHAT_BODY, token)
            observed = now() - sent
            assert status == 200
            rec = stack.telemetry.window_records()[-1]
            assert rec.outcome == "ok"
            assert rec.latency_s == pytest.approx(observed, abs=1.0)  # within a tick
            assert rec.arrived_at <= rec.dispatched_at <= rec.completed_at

    vrun(main())


def test_error_outcomes_recorded():
    async def main():
        cfg = make_config(endpoints=[{
            "endpoint_id": "sophia-ep", "cluster_id": "sophia",
            "registered_functions": ["embed_v1"]}])
        async with running_stack(cfg) as stack:
            async with client_for(stack) as client:
                r = await client.post("/v1/chat/completions", json=CHAT_BODY,
                                      headers=auth(stack.mint()))
                assert r.status_code == 403  # inference function not registered
                rec = stack.telemetry.window_records()[-1]
                assert rec.outcome == "403"

    vrun(main())
