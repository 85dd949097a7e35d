"""Task and result records flowing gateway -> router -> fabric -> backend."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any

from .simclock import now

_counter = itertools.count(1)


def make_id(prefix: str) -> str:
    """Sortable request id: millisecond timestamp + monotonic counter."""
    ms = int(now() * 1000)
    return f"{prefix}-{ms:012x}{next(_counter):08x}"


@dataclass
class InferenceTask:
    task_id: str
    kind: str  # chat | completion | embedding
    model: str
    payload: dict[str, Any]
    principal_subject: str
    function_name: str
    stream: bool = False
    arrived_at: float = 0.0
    dispatched_at: float | None = None
    completed_at: float | None = None
    endpoint_id: str | None = None
    instance_id: str | None = None

    @classmethod
    def create(
        cls,
        kind: str,
        model: str,
        payload: dict[str, Any],
        principal_subject: str,
        stream: bool = False,
    ) -> "InferenceTask":
        function = "embed_v1" if kind == "embedding" else "infer_v1"
        return cls(
            task_id=make_id("task"),
            kind=kind,
            model=model,
            payload=payload,
            principal_subject=principal_subject,
            function_name=function,
            stream=stream,
            arrived_at=now(),
        )


@dataclass
class InferenceResult:
    task_id: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    finish_reason: str = "stop"
    output_text: str | None = None
    embeddings: list[list[float]] | None = field(default=None, repr=False)
    raw_response: dict | None = None  # passthrough relays verbatim

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.completion_tokens
