"""Deterministic in-process backend with a parametric latency model.

Latency of one call, with P prompt tokens of which M hit the workflow's cached
prefix and O output tokens::

    ttft  = queue + fixed_overhead + prefill_ms_per_token * (P - M)
    total = ttft + decode_ms_per_token * O

The cache keeps at most one token prefix per workflow. Entries are replaced by
each served prompt, evicted least-recently-used under capacity pressure unless
preserved, and dropped by explicit flushes.
"""

from __future__ import annotations

import asyncio
import enum
import json
import logging
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence, Union

from stageflow.backends.base import (
    Backend,
    CapacityExceeded,
    CompletionRequest,
    CompletionResponse,
    Timing,
)
from stageflow.clock import Clock
from stageflow.workflow import Message, ToolCall, Usage

logger = logging.getLogger(__name__)


def tokenize_sim(text: str) -> list[str]:
    """Whitespace-run tokenizer used everywhere in simulation."""
    return text.split()


def message_tokens(messages: Sequence[Message]) -> list[str]:
    tokens: list[str] = []
    for m in messages:
        tokens.extend(tokenize_sim(m.content))
        for call in m.tool_calls:
            tokens.extend(tokenize_sim(f"{call.tool_name} {json.dumps(call.arguments, sort_keys=True)}"))
    return tokens


class OutputRule(str, enum.Enum):
    FROM_TRACE = "from_trace"
    CONSTANT = "constant"
    SCRIPTED = "scripted"


@dataclass(frozen=True)
class OutputTokens:
    """How many tokens an unscripted reply has.

    ``from_trace`` reads ``field`` from the request metadata and falls back to
    ``value``; ``constant`` always uses ``value``. Scripted replies always
    take precedence.
    """

    rule: OutputRule = OutputRule.CONSTANT
    value: int = 64
    field: str = "expected_output_tokens"

    def __post_init__(self):
        object.__setattr__(self, "rule", OutputRule(self.rule))
        if self.value < 0:
            raise ValueError("output token count must be >= 0")


@dataclass(frozen=True)
class SimulatedBackendConfig:
    prefill_ms_per_token: float = 1.0
    decode_ms_per_token: float = 10.0
    fixed_overhead_ms: float = 0.0
    max_concurrency: int = 1
    cache_capacity_tokens: int = 1_000_000
    output_tokens: OutputTokens = field(default_factory=OutputTokens)

    def __post_init__(self):
        if self.prefill_ms_per_token <= 0 or self.decode_ms_per_token <= 0:
            raise ValueError("per-token latencies must be positive")
        if self.fixed_overhead_ms < 0:
            raise ValueError("fixed_overhead_ms must be >= 0")
        if self.max_concurrency < 1:
            raise ValueError("max_concurrency must be >= 1")
        if self.cache_capacity_tokens <= 0:
            raise ValueError("cache_capacity_tokens must be positive")


@dataclass(frozen=True)
class ScriptedReply:
    content: str = ""
    tool_calls: tuple[tuple[str, Any], ...] = ()
    output_tokens: int | None = None


Script = Union[
    Mapping[tuple[str, int], ScriptedReply],
    Callable[[CompletionRequest], Union[ScriptedReply, None]],
]


def script_from_table(table: Mapping[tuple[str, int], ScriptedReply]) -> Callable[[CompletionRequest], ScriptedReply | None]:
    """Look replies up by ``(stage_id, turn)`` from request metadata."""

    def lookup(req: CompletionRequest) -> ScriptedReply | None:
        key = (req.metadata.get("stage_id"), int(req.metadata.get("turn", 0)))
        return table.get(key)

    return lookup


@dataclass
class _Entry:
    tokens: tuple[str, ...]
    preserved: bool = False


class SimulatedCache:
    def __init__(self, capacity_tokens: int):
        self.capacity = capacity_tokens
        self._entries: OrderedDict[str, _Entry] = OrderedDict()
        self.occupancy_tokens = 0

    @property
    def utilization(self) -> float:
        return self.occupancy_tokens / self.capacity

    def pinned(self, workflow_id: str) -> tuple[str, ...] | None:
        e = self._entries.get(workflow_id)
        return e.tokens if e else None

    def is_preserved(self, workflow_id: str) -> bool:
        e = self._entries.get(workflow_id)
        return bool(e and e.preserved)

    def workflows(self) -> list[str]:
        return list(self._entries)

    def prefix_match(self, workflow_id: str, tokens: Sequence[str]) -> int:
        e = self._entries.get(workflow_id)
        if e is None:
            return 0
        n = 0
        for a, b in zip(e.tokens, tokens):
            if a != b:
                break
            n += 1
        if n:
            self._entries.move_to_end(workflow_id)
        return n

    def store(self, workflow_id: str, tokens: Sequence[str]) -> None:
        """Make ``tokens`` the workflow's cached prefix, evicting unpreserved LRU entries if needed."""
        tokens = tuple(tokens)
        old = self._entries.get(workflow_id)
        old_len = len(old.tokens) if old else 0
        need = len(tokens) - old_len
        if self.occupancy_tokens + need > self.capacity:
            for wid in [w for w, e in self._entries.items() if not e.preserved and w != workflow_id]:
                if self.occupancy_tokens + need <= self.capacity:
                    break
                self.occupancy_tokens -= len(self._entries.pop(wid).tokens)
        if self.occupancy_tokens + need > self.capacity:
            raise CapacityExceeded(
                f"cannot cache {len(tokens)} tokens for {workflow_id!r}: "
                f"{self.occupancy_tokens}/{self.capacity} occupied"
            )
        self._entries[workflow_id] = _Entry(tokens, preserved=old.preserved if old else False)
        self._entries.move_to_end(workflow_id)
        self.occupancy_tokens += need

    def preserve(self, workflow_id: str) -> bool:
        e = self._entries.get(workflow_id)
        if e is None or not e.tokens:
            return False
        e.preserved = True
        return True

    def flush(self, workflow_id: str | None = None) -> int:
        if workflow_id is None:
            freed = self.occupancy_tokens
            self._entries.clear()
            self.occupancy_tokens = 0
            return freed
        e = self._entries.pop(workflow_id, None)
        if e is None:
            return 0
        self.occupancy_tokens -= len(e.tokens)
        return len(e.tokens)


def prefix_match(cache: SimulatedCache, workflow_id: str, tokens: Sequence[str]) -> int:
    return cache.prefix_match(workflow_id, tokens)


@dataclass(frozen=True)
class ServedRecord:
    model: str
    workflow_id: str | None
    stage_id: str | None
    purpose: str
    prompt_tokens: int
    completion_tokens: int
    cached_prefix_tokens: int


class SimulatedBackend(Backend):
    def __init__(
        self,
        ref: str,
        model: str,
        config: SimulatedBackendConfig,
        clock: Clock,
        script: Script | None = None,
    ):
        self.ref = ref
        self.model = model
        self.config = config
        self.clock = clock
        self.max_concurrency = config.max_concurrency
        self.cache = SimulatedCache(config.cache_capacity_tokens)
        self._scripts: list[Callable[[CompletionRequest], ScriptedReply | None]] = []
        if script is not None:
            self.add_script(script)
        self.calls = 0
        self.flush_calls = 0
        self.preserve_calls = 0
        self.served: list[ServedRecord] = []
        self._busy = 0
        self._waiters: deque[asyncio.Future] = deque()

    def add_script(self, script: Script) -> None:
        self._scripts.append(script if callable(script) else script_from_table(script))

    # -- slots ----------------------------------------------------------------

    async def _acquire(self) -> None:
        if self._busy < self.max_concurrency and not self._waiters:
            self._busy += 1
            return
        fut = asyncio.get_running_loop().create_future()
        self._waiters.append(fut)
        try:
            await fut
        except asyncio.CancelledError:
            if fut.done() and not fut.cancelled():
                self._release()
            raise

    def _release(self) -> None:
        while self._waiters:
            fut = self._waiters.popleft()
            if not fut.done():
                fut.set_result(None)  # hand the slot over
                return
        self._busy -= 1

    # -- serving --------------------------------------------------------------

    def _scripted(self, req: CompletionRequest) -> ScriptedReply | None:
        for s in self._scripts:
            reply = s(req)
            if reply is not None:
                return reply
        return None

    def _reply(self, req: CompletionRequest) -> tuple[str, list[ToolCall], int]:
        scripted = self._scripted(req)
        if scripted is not None:
            turn = int(req.metadata.get("turn", 0))
            calls = [
                ToolCall(name, args, f"call-{turn}-{i}")
                for i, (name, args) in enumerate(scripted.tool_calls)
            ]
            if scripted.output_tokens is not None:
                n_out = scripted.output_tokens
            else:
                n_out = len(message_tokens([Message("assistant", scripted.content, tool_calls=tuple(calls))]))
            return scripted.content, calls, n_out

        rule = self.config.output_tokens
        n_out = rule.value
        if rule.rule is OutputRule.FROM_TRACE:
            n_out = int(req.metadata.get(rule.field, rule.value))
        n_out = max(0, min(n_out, req.max_tokens))
        text = " ".join(f"tok{i}" for i in range(n_out))
        if req.response_format is not None:
            text = json.dumps({"output": text})
        return text, [], n_out

    async def complete(self, req: CompletionRequest) -> CompletionResponse:
        cfg = self.config
        self.calls += 1
        arrived = self.clock.now()
        await self._acquire()
        try:
            queue_ms = self.clock.now() - arrived
            tokens = message_tokens(req.messages)
            workflow_id = req.metadata.get("workflow_id")
            matched = self.cache.prefix_match(workflow_id, tokens) if workflow_id else 0
            content, tool_calls, n_out = self._reply(req)

            service_ttft = cfg.fixed_overhead_ms + cfg.prefill_ms_per_token * (len(tokens) - matched)
            await self.clock.sleep(service_ttft)
            if workflow_id and tokens:
                try:
                    self.cache.store(workflow_id, tokens)
                except CapacityExceeded as exc:
                    logger.info("%s: %s", self.ref, exc)
            decode = cfg.decode_ms_per_token * n_out
            await self.clock.sleep(decode)
        finally:
            self._release()

        usage = Usage(len(tokens), n_out, matched)
        self.served.append(
            ServedRecord(
                self.model,
                workflow_id,
                req.metadata.get("stage_id"),
                req.metadata.get("purpose", "stage"),
                usage.prompt_tokens,
                usage.completion_tokens,
                usage.cached_prefix_tokens,
            )
        )
        ttft = queue_ms + service_ttft
        return CompletionResponse(content, tool_calls, usage, Timing(queue_ms, ttft, ttft + decode))

    async def flush(self, workflow_id: str | None = None) -> int:
        self.flush_calls += 1
        return self.cache.flush(workflow_id)

    async def preserve(self, workflow_id: str) -> bool:
        self.preserve_calls += 1
        return self.cache.preserve(workflow_id)

    async def utilization(self) -> float:
        return self.cache.utilization


def cache_utilization(backend: SimulatedBackend) -> float:
    return backend.cache.utilization
