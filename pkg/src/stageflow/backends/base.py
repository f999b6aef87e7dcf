from __future__ import annotations

import abc
from dataclasses import dataclass, field
from typing import Any, Mapping

from stageflow.workflow import Message, ToolCall, Usage


class BackendError(Exception):
    """Any failure talking to, or inside, a backend."""


class EmptyPrompt(BackendError):
    pass


class TransportError(BackendError):
    pass


class Non2xxStatus(BackendError):
    def __init__(self, code: int, body: str):
        self.code = code
        self.body = body
        super().__init__(f"HTTP {code}: {body[:200]}")


class MalformedResponse(BackendError):
    pass


class CapacityExceeded(BackendError):
    pass


@dataclass(frozen=True)
class CompletionRequest:
    model: str
    messages: list[Message]
    temperature: float = 0.0
    max_tokens: int = 256
    tools: list[Any] | None = None
    response_format: Any = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")


@dataclass(frozen=True)
class Timing:
    queue_ms: float
    ttft_ms: float
    total_ms: float
    # set when ttft could not be observed (non-streaming HTTP) and equals total
    ttft_estimated: bool = False


@dataclass(frozen=True)
class CompletionResponse:
    content: str
    tool_calls: list[ToolCall]
    usage: Usage
    timing: Timing


class Backend(abc.ABC):
    """Uniform interface every inference endpoint implements."""

    ref: str
    model: str
    max_concurrency: int

    @abc.abstractmethod
    async def complete(self, req: CompletionRequest) -> CompletionResponse: ...

    @abc.abstractmethod
    async def flush(self, workflow_id: str | None = None) -> int:
        """Drop cached context for one workflow, or everything when ``None``. Returns freed tokens."""

    @abc.abstractmethod
    async def preserve(self, workflow_id: str) -> bool: ...

    @abc.abstractmethod
    async def utilization(self) -> float | None:
        """KV-cache utilization in [0, 1], or ``None`` if the backend cannot report it."""


def tool_schema(name: str, parameters: Any = None, description: str = "") -> dict[str, Any]:
    """Chat-completions ``tools`` entry for one function tool."""
    fn: dict[str, Any] = {"name": name}
    if description:
        fn["description"] = description
    fn["parameters"] = parameters if parameters is not None else {"type": "object", "properties": {}}
    return {"type": "function", "function": fn}
