"""Workflow execution: readiness-driven dispatch through per-backend queues.

Every completion call, including each turn of an agent loop, is enqueued on
its backend's two-level queue. A per-backend pump moves requests from the
queue to the backend while it has free slots, so a request waiting on a tool
holds no slot and other queued work is served in the meantime.
"""

from __future__ import annotations

import asyncio
import inspect
import itertools
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Awaitable, Callable, Iterable, Mapping, Sequence

from stageflow.backends.base import Backend, CompletionRequest, CompletionResponse, EmptyPrompt, tool_schema
from stageflow.backends.simulated import message_tokens
from stageflow.clock import Clock
from stageflow.mapper import MappingPlan, Provenance
from stageflow.scheduler import BackendQueue, PolicyRegistry, QueuedRequest
from stageflow.signals import LifecycleSignal, SignalKind
from stageflow.workflow import (
    Context,
    ExecutionMode,
    Message,
    StageResult,
    StageSpec,
    StageTiming,
    ToolCall,
    ToolResult,
    ToolSpec,
    Usage,
    ValidatedWorkflow,
    build_context,
    ready_stages,
)

logger = logging.getLogger(__name__)

DEFAULT_REROUTE_LIMIT = 32


class StageFailed(Exception):
    def __init__(self, stage_id: str, cause: BaseException):
        self.stage_id = stage_id
        self.cause = cause
        super().__init__(f"stage {stage_id!r} failed: {type(cause).__name__}: {cause}")


class ToolNotFound(Exception):
    def __init__(self, tool_name: str):
        self.tool_name = tool_name
        super().__init__(f"no tool named {tool_name!r}")


class MaxTurnsExceeded(Exception):
    """Agent loop hit its turn limit; ``result`` holds the partial transcript."""

    def __init__(self, stage_id: str, result: StageResult):
        self.stage_id = stage_id
        self.result = result
        super().__init__(f"stage {stage_id!r} exceeded {result.calls} turns")


# A dispatcher performs one completion call and reports when it was enqueued,
# when a backend slot was obtained and when the response arrived (clock readings,
# so downstream dispatch can never precede upstream completion by rounding).
Dispatch = Callable[[CompletionRequest], Awaitable[tuple[CompletionResponse, float, float, float]]]


def _direct(backend: Backend, clock: Clock) -> Dispatch:
    async def call(req: CompletionRequest) -> tuple[CompletionResponse, float, float, float]:
        ts = clock.now()
        resp = await backend.complete(req)
        return resp, ts, ts, clock.now()

    return call


def _request(stage: StageSpec, model: str, messages: Context, turn: int, metadata: Mapping[str, Any]) -> CompletionRequest:
    tools = [tool_schema(t.name, t.parameter_schema, t.description) for t in stage.tools] or None
    return CompletionRequest(
        model=model,
        messages=list(messages),
        temperature=stage.params.temperature,
        max_tokens=stage.params.max_tokens,
        tools=tools,
        response_format=stage.params.response_format,
        metadata={**stage.metadata, **metadata, "stage_id": stage.id, "turn": turn, "purpose": "stage"},
    )


def _check_prompt(stage: StageSpec, context: Context) -> None:
    if not any(m.content.strip() or m.tool_calls for m in context):
        raise EmptyPrompt(f"stage {stage.id!r} has an empty prompt")


def _structured(stage: StageSpec, content: str) -> Any:
    if stage.params.response_format is None:
        return None
    try:
        return json.loads(content)
    except json.JSONDecodeError:
        return content


async def _single(
    stage: StageSpec, context: Context, dispatch: Dispatch, model: str, ref: str, metadata: Mapping[str, Any]
) -> StageResult:
    _check_prompt(stage, context)
    resp, enq, disp, done = await dispatch(_request(stage, model, context, 0, metadata))
    timing = StageTiming(enq, disp, min(disp + resp.timing.ttft_ms, done), done)
    return StageResult(
        stage.id,
        resp.content,
        timing,
        usage=Usage(resp.usage.prompt_tokens, resp.usage.completion_tokens, resp.usage.cached_prefix_tokens),
        structured=_structured(stage, resp.content),
        backend_ref=ref,
        model=model,
        calls=1,
    )


async def execute_tool(call: ToolCall, registry: Mapping[str, ToolSpec], clock: Clock | None = None) -> ToolResult:
    """Run one tool call. Handler exceptions become an error result, not a raise."""
    spec = registry.get(call.tool_name)
    if spec is None:
        raise ToolNotFound(call.tool_name)
    if clock is not None and spec.latency_ms > 0:
        await clock.sleep(spec.latency_ms)
    try:
        out = spec.handler(call.arguments)
        if inspect.isawaitable(out):
            out = await out
    except Exception as exc:
        return ToolResult(call.call_id, f"{type(exc).__name__}: {exc}", is_error=True)
    return ToolResult(call.call_id, out if isinstance(out, str) else json.dumps(out, sort_keys=True))


async def _agent_loop(
    stage: StageSpec,
    context: Context,
    dispatch: Dispatch,
    model: str,
    ref: str,
    metadata: Mapping[str, Any],
    tools: Mapping[str, ToolSpec],
    clock: Clock,
) -> tuple[StageResult, Context]:
    _check_prompt(stage, context)
    messages = list(context)
    usage = Usage()
    transcript: list[tuple[ToolCall, ToolResult]] = []
    timing: StageTiming | None = None
    content = ""
    for turn in range(stage.max_turns):
        resp, enq, disp, done = await dispatch(_request(stage, model, messages, turn, metadata))
        usage.add(resp.usage)
        if timing is None:
            timing = StageTiming(enq, disp, min(disp + resp.timing.ttft_ms, done), done)
        else:
            timing.complete_ts = done
        content = resp.content
        if not resp.tool_calls:
            result = StageResult(stage.id, content, timing, usage, _structured(stage, content), transcript,
                                 ref, model, turn + 1)
            return result, messages
        messages.append(Message("assistant", resp.content, tool_calls=tuple(resp.tool_calls)))
        for call in resp.tool_calls:
            res = await execute_tool(call, tools, clock)
            transcript.append((call, res))
            messages.append(Message("tool", res.content, tool_call_id=call.call_id))
        timing.complete_ts = clock.now()

    result = StageResult(stage.id, content, timing, usage, None, transcript, ref, model, stage.max_turns,
                         incomplete=True)
    raise MaxTurnsExceeded(stage.id, result)


async def run_stage(
    stage: StageSpec, context: Context, backend: Backend, clock: Clock, metadata: Mapping[str, Any] | None = None
) -> StageResult:
    """Execute a single-shot stage with one direct completion call."""
    if stage.execution_mode is not ExecutionMode.SINGLE_SHOT:
        raise ValueError(f"stage {stage.id!r} is not single-shot")
    return await _single(stage, context, _direct(backend, clock), backend.model, backend.ref, metadata or {})


async def run_agent_loop(
    stage: StageSpec,
    context: Context,
    backend: Backend,
    clock: Clock,
    tools: Iterable[ToolSpec] | None = None,
    metadata: Mapping[str, Any] | None = None,
) -> StageResult:
    """Execute an agent-loop stage with direct completion calls.

    Raises:
        MaxTurnsExceeded: carrying the partial result.
        ToolNotFound: when the model calls an unregistered tool.
    """
    if stage.execution_mode is not ExecutionMode.AGENT_LOOP:
        raise ValueError(f"stage {stage.id!r} is not an agent loop")
    registry = {t.name: t for t in (stage.tools if tools is None else tools)}
    result, _ = await _agent_loop(stage, context, _direct(backend, clock), backend.model, backend.ref,
                                  metadata or {}, registry, clock)
    return result


def reroute_on_overload(
    primary_ref: str,
    alternates: Sequence[str],
    queues: Mapping[str, BackendQueue],
    limit: int = DEFAULT_REROUTE_LIMIT,
) -> str:
    """Stay on ``primary_ref`` unless its queue is at ``limit``; then take the first alternate below it."""
    if len(queues[primary_ref]) < limit:
        return primary_ref
    for ref in alternates:
        if ref in queues and len(queues[ref]) < limit:
            return ref
    return primary_ref


@dataclass
class ExecutionReport:
    workflow_id: str
    template: str
    results: dict[str, StageResult] = field(default_factory=dict)
    # completed | incomplete | failed | aborted
    status: dict[str, str] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)
    start_ts: float = 0.0
    end_ts: float = 0.0

    @property
    def makespan_ms(self) -> float:
        return self.end_ts - self.start_ts

    @property
    def ok(self) -> bool:
        return all(s in ("completed", "incomplete") for s in self.status.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "workflow_id": self.workflow_id,
            "template": self.template,
            "start_ts": self.start_ts,
            "end_ts": self.end_ts,
            "makespan_ms": self.makespan_ms,
            "status": dict(sorted(self.status.items())),
            "errors": dict(sorted(self.errors.items())),
            "provenance": dict(sorted(self.provenance.items())),
            "results": {k: self.results[k].to_dict() for k in sorted(self.results)},
        }


Listener = Callable[[LifecycleSignal], Any]


class Orchestrator:
    """Runs validated workflows against registered backends.

    ``memory`` is any object with an async ``handle(signal)`` (normally a
    MemoryManager). ``listeners`` receive every signal as well, after memory.
    """

    def __init__(
        self,
        backends: Mapping[str, Backend],
        clock: Clock,
        *,
        memory: Any = None,
        policies: PolicyRegistry | None = None,
        listeners: Iterable[Listener] = (),
        alternates: Mapping[str, Sequence[str]] | None = None,
        reroute_limit: int = DEFAULT_REROUTE_LIMIT,
        stage_policy: str = "fcfs",
        request_policy: str = "fcfs",
    ):
        self.backends = dict(backends)
        self.clock = clock
        self.memory = memory
        self.policies = policies or PolicyRegistry()
        self.listeners = list(listeners)
        self.alternates = {k: list(v) for k, v in (alternates or {}).items()}
        self.reroute_limit = reroute_limit
        self.queues = {
            ref: BackendQueue(ref, stage_policy, request_policy, self.policies) for ref in sorted(self.backends)
        }
        self.signals: list[LifecycleSignal] = []
        self._in_flight = {ref: 0 for ref in self.backends}
        self._tasks: set[asyncio.Task] = set()
        self._ids = itertools.count()
        self._req_ids = itertools.count()

    # -- signals --------------------------------------------------------------

    async def _emit(self, sig: LifecycleSignal) -> None:
        self.signals.append(sig)
        if self.memory is not None:
            await self.memory.handle(sig)
        for fn in self.listeners:
            out = fn(sig)
            if inspect.isawaitable(out):
                await out

    # -- dispatch -------------------------------------------------------------

    def _dispatcher(self, ref: str, queue_key: str, stage: StageSpec, priority: int, workflow_id: str) -> Dispatch:
        async def call(req: CompletionRequest) -> tuple[CompletionResponse, float, float, float]:
            fut = asyncio.get_running_loop().create_future()
            enqueue_ts = self.clock.now()
            qr = QueuedRequest(
                request_id=f"r{next(self._req_ids)}",
                workflow_id=workflow_id,
                stage_id=queue_key,
                arrival_ts=enqueue_ts,
                priority=priority,
                prompt_tokens_estimate=len(message_tokens(req.messages)),
                context=req.messages,
                payload=(req, fut),
            )
            self.queues[ref].enqueue(qr, stage.stage_scheduling_policy, stage.request_scheduling_policy)
            self._pump(ref)
            resp, dispatch_ts, done_ts = await fut
            return resp, enqueue_ts, dispatch_ts, done_ts

        return call

    def _pump(self, ref: str) -> None:
        backend = self.backends[ref]
        queue = self.queues[ref]
        loop = asyncio.get_running_loop()
        while self._in_flight[ref] < backend.max_concurrency:
            r = queue.dequeue_next()
            if r is None:
                return
            self._in_flight[ref] += 1
            task = loop.create_task(self._serve(ref, r))
            self._tasks.add(task)
            task.add_done_callback(self._tasks.discard)

    async def _serve(self, ref: str, r: QueuedRequest) -> None:
        req, fut = r.payload
        dispatch_ts = self.clock.now()
        try:
            resp = await self.backends[ref].complete(req)
        except Exception as exc:
            if not fut.done():
                fut.set_exception(exc)
        else:
            if not fut.done():
                fut.set_result((resp, dispatch_ts, self.clock.now()))
        finally:
            self._in_flight[ref] -= 1
            self._pump(ref)

    # -- execution --------------------------------------------------------------

    async def execute_workflow(
        self,
        wf: ValidatedWorkflow,
        plan: MappingPlan,
        workflow_id: str | None = None,
        metadata: Mapping[str, Any] | None = None,
    ) -> ExecutionReport:
        """Run every stage of ``wf`` as soon as its upstream stages complete.

        A failed stage aborts its descendants only; independent branches run on.
        ``metadata`` is forwarded with every completion request of this run.
        """
        workflow_id = workflow_id or f"{wf.id}-{next(self._ids)}"
        metadata = {**(metadata or {}), "workflow_id": workflow_id}
        if self.memory is not None and wf.memory_policy and hasattr(self.memory, "set_workflow_policy"):
            self.memory.set_workflow_policy(workflow_id, wf.memory_policy)

        report = ExecutionReport(workflow_id, wf.id, start_ts=self.clock.now())
        completed: set[str] = set()
        failed: set[str] = set()
        running: dict[asyncio.Task, str] = {}
        first_enqueue: list[float] = []

        loop = asyncio.get_running_loop()
        while True:
            blocked = set(running.values()) | failed | set(report.status)
            for sid in sorted(ready_stages(wf, completed, blocked - completed)):
                task = loop.create_task(self._execute_stage(wf, plan, sid, workflow_id, metadata, report))
                running[task] = sid
            if not running:
                break
            done, _ = await asyncio.wait(running, return_when=asyncio.FIRST_COMPLETED)
            for task in sorted(done, key=lambda t: running[t]):
                sid = running.pop(task)
                exc = task.exception()
                if exc is None:
                    completed.add(sid)
                    first_enqueue.append(report.results[sid].timing.enqueue_ts)
                    continue
                failed.add(sid)
                report.status[sid] = "failed"
                report.errors[sid] = str(exc)
                logger.warning("%s: %s", workflow_id, exc)
                for d in sorted(wf.descendants(sid)):
                    if d not in report.status:
                        report.status[d] = "aborted"

        await self._emit(LifecycleSignal(SignalKind.WORKFLOW_COMPLETE, workflow_id, self.clock.now()))
        if report.results:
            report.start_ts = min(first_enqueue)
            report.end_ts = max(r.timing.complete_ts for r in report.results.values())
        else:
            report.end_ts = report.start_ts
        return report

    async def _execute_stage(
        self,
        wf: ValidatedWorkflow,
        plan: MappingPlan,
        sid: str,
        workflow_id: str,
        metadata: Mapping[str, Any],
        report: ExecutionReport,
    ) -> None:
        stage = wf.stages[sid]
        upstream = {u: report.results[u] for u in wf.upstream[sid]}
        try:
            context = build_context(stage, upstream, wf.upstream[sid])
            ref, provenance = await plan.resolve(sid, context, {**metadata, "stage_id": sid})
        except Exception as exc:
            raise StageFailed(sid, exc) from exc
        ref = reroute_on_overload(ref, self.alternates.get(ref, ()), self.queues, self.reroute_limit)
        backend = self.backends[ref]
        report.provenance[sid] = provenance.describe() if isinstance(provenance, Provenance) else str(provenance)
        priority = stage.scheduling_hints.resolve(upstream) if stage.scheduling_hints else 0

        await self._emit(LifecycleSignal(
            SignalKind.STAGE_START, workflow_id, self.clock.now(), sid, ref, backend.model,
            len(message_tokens(context)), stage.cache_policy, stage.cache_tau,
        ))
        dispatch = self._dispatcher(ref, f"{wf.id}/{sid}", stage, priority, workflow_id)
        final_context = context
        try:
            if stage.execution_mode is ExecutionMode.AGENT_LOOP:
                tools = {t.name: t for t in stage.tools}
                result, final_context = await _agent_loop(
                    stage, context, dispatch, backend.model, ref, metadata, tools, self.clock
                )
            else:
                result = await _single(stage, context, dispatch, backend.model, ref, metadata)
            status = "completed"
        except MaxTurnsExceeded as exc:
            result, status = exc.result, "incomplete"
        except Exception as exc:
            await self._emit(LifecycleSignal(
                SignalKind.STAGE_COMPLETE, workflow_id, self.clock.now(), sid, ref, backend.model,
                len(message_tokens(final_context)),
            ))
            raise StageFailed(sid, exc) from exc

        report.results[sid] = result
        report.status[sid] = status
        await self._emit(LifecycleSignal(
            SignalKind.STAGE_COMPLETE, workflow_id, self.clock.now(), sid, ref, backend.model,
            len(message_tokens(final_context)),
        ))

    async def drain(self) -> None:
        """Wait for any serve tasks still running (e.g. after a cancelled workflow)."""
        while self._tasks:
            await asyncio.gather(*list(self._tasks), return_exceptions=True)


async def execute_workflow(
    wf: ValidatedWorkflow,
    plan: MappingPlan,
    backends: Mapping[str, Backend],
    clock: Clock,
    memory: Any = None,
    policies: PolicyRegistry | None = None,
    workflow_id: str | None = None,
    metadata: Mapping[str, Any] | None = None,
) -> ExecutionReport:
    """One-off execution with a fresh orchestrator."""
    orch = Orchestrator(backends, clock, memory=memory, policies=policies)
    return await orch.execute_workflow(wf, plan, workflow_id, metadata)
