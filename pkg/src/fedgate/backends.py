"""Pluggable inference engines behind one interface.

``MockBackend`` is a deterministic stand-in for a real serving engine: token
content is derived from a hash of (seed, prompt), token counts are exact, and
emission pacing is shaped so that one instance's aggregate output rate matches
its configured ``service_rate`` whenever it is busy. ``PassthroughBackend``
relays OpenAI-format requests verbatim to any OpenAI-compatible server.
"""

from __future__ import annotations

import asyncio
import hashlib
import math
import random
from typing import AsyncIterator, Callable

import httpx

from .config import ModelConfig
from .errors import BackendUnavailable, UpstreamError

_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def _word(rng: random.Random) -> str:
    n = rng.randint(1, 3)
    return "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(n))


def _request_rng(seed: int, material: str) -> random.Random:
    digest = hashlib.sha256(f"{seed}|{material}".encode()).digest()
    return random.Random(digest)


def prompt_token_count(payload: dict) -> int:
    """Whitespace token count of the request's textual input."""
    if "messages" in payload:
        return sum(len(str(m.get("content", "")).split()) for m in payload["messages"])
    if "prompt" in payload:
        return len(str(payload["prompt"]).split())
    if "input" in payload:
        inputs = payload["input"]
        if isinstance(inputs, str):
            inputs = [inputs]
        return sum(len(str(x).split()) for x in inputs)
    return 0


def prompt_material(payload: dict) -> str:
    if "messages" in payload:
        return "\n".join(f"{m.get('role', '')}:{m.get('content', '')}" for m in payload["messages"])
    if "prompt" in payload:
        return str(payload["prompt"])
    return ""


class MockBackend:
    """Deterministic token generator calibrated to a service rate."""

    def __init__(self, model: ModelConfig, seed: int = 0):
        self.model = model
        self.seed = seed
        self.tokens_emitted = 0  # lifetime counter, for exact accounting checks

    def output_length(self, payload: dict) -> int:
        """min(max_tokens, target_tokens); a missing cap falls back to the
        model's default target length."""
        max_tokens = int(payload.get("max_tokens") or self.model.default_target_tokens)
        target = payload.get("target_tokens")
        if target:
            return max(1, min(max_tokens, int(target)))
        return max(1, max_tokens)

    async def generate(
        self,
        payload: dict,
        load: Callable[[], int],
    ) -> AsyncIterator[str]:
        """Yield exactly ``output_length`` whitespace-separated pseudo-words.

        ``load()`` reports how many requests currently share the instance;
        each token waits ``load()/service_rate`` so the instance's aggregate
        emission rate stays at ``service_rate`` under any concurrency.
        """
        n_tokens = self.output_length(payload)
        rng = _request_rng(self.seed, prompt_material(payload))
        if self.model.per_request_overhead_s > 0:
            await asyncio.sleep(self.model.per_request_overhead_s)
        chunk = max(1, self.model.emit_chunk_tokens)
        rate = self.model.service_rate
        emitted = 0
        while emitted < n_tokens:
            k = min(chunk, n_tokens - emitted)
            await asyncio.sleep(k * max(1, load()) / rate)
            for _ in range(k):
                emitted += 1
                self.tokens_emitted += 1
                word = _word(rng)
                yield word if emitted == n_tokens else word + " "

    def embed(self, inputs: list[str]) -> list[list[float]]:
        """Unit-norm vectors, deterministic per input string."""
        dim = self.model.embedding_dim or 16
        vectors = []
        for text in inputs:
            rng = _request_rng(self.seed, f"embed:{text}")
            v = [rng.gauss(0.0, 1.0) for _ in range(dim)]
            norm = math.sqrt(sum(x * x for x in v)) or 1.0
            vectors.append([x / norm for x in v])
        return vectors


class PassthroughBackend:
    """Forwards OpenAI-format bodies to an upstream server and relays replies."""

    def __init__(
        self,
        base_url: str,
        client: httpx.AsyncClient | None = None,
        timeout_s: float = 300.0,
    ):
        self.base_url = base_url.rstrip("/")
        self._client = client or httpx.AsyncClient(timeout=timeout_s)
        self._timeout = timeout_s

    async def call(self, path: str, payload: dict) -> dict:
        try:
            resp = await self._client.post(
                self.base_url + path, json=payload, timeout=self._timeout
            )
        except httpx.HTTPError as exc:
            raise BackendUnavailable(f"upstream unreachable: {exc}") from exc
        if resp.status_code // 100 != 2:
            raise UpstreamError(f"upstream returned {resp.status_code}", status=resp.status_code)
        return resp.json()

    async def stream(self, path: str, payload: dict) -> AsyncIterator[bytes]:
        try:
            async with self._client.stream(
                "POST", self.base_url + path, json=payload, timeout=self._timeout
            ) as resp:
                if resp.status_code // 100 != 2:
                    raise UpstreamError(
                        f"upstream returned {resp.status_code}", status=resp.status_code
                    )
                async for chunk in resp.aiter_bytes():
                    yield chunk
        except httpx.HTTPError as exc:
            raise BackendUnavailable(f"upstream unreachable: {exc}") from exc

    async def aclose(self) -> None:
        await self._client.aclose()
