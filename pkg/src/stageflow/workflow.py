"""Workflow model: stages, DAG validation, readiness and context propagation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import TYPE_CHECKING, Any, Awaitable, Callable, Iterable, Mapping, Union

if TYPE_CHECKING:
    from stageflow.mapper import BackendRegistry


class ExecutionMode(str, enum.Enum):
    SINGLE_SHOT = "single_shot"
    AGENT_LOOP = "agent_loop"


class CachePolicy(str, enum.Enum):
    PRESERVE = "preserve"
    FLUSH = "flush"
    NONE = "none"


@dataclass(frozen=True)
class Message:
    role: str
    content: str
    tool_call_id: str | None = None
    tool_calls: tuple[ToolCall, ...] = ()

    def __post_init__(self):
        if self.role not in ("system", "user", "assistant", "tool"):
            raise ValueError(f"invalid message role {self.role!r}")


Context = list[Message]


@dataclass(frozen=True)
class ToolCall:
    tool_name: str
    arguments: Any
    call_id: str


@dataclass(frozen=True)
class ToolResult:
    call_id: str
    content: str
    is_error: bool = False


ToolHandler = Callable[[Any], Union[str, Awaitable[str]]]


@dataclass(frozen=True)
class ToolSpec:
    name: str
    handler: ToolHandler
    parameter_schema: Any = None
    description: str = ""
    # simulated duration of the external call, on the driving clock
    latency_ms: float = 0.0


@dataclass(frozen=True)
class InferenceParams:
    temperature: float = 0.0
    max_tokens: int = 256
    response_format: Any = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")


@dataclass(frozen=True)
class SchedulingHints:
    """Static priority, or a function of upstream results evaluated at dispatch."""

    priority: int = 0
    priority_fn: Callable[[Mapping[str, StageResult]], int] | None = None

    def resolve(self, upstream: Mapping[str, StageResult]) -> int:
        if self.priority_fn is not None:
            return int(self.priority_fn(upstream))
        return self.priority


@dataclass
class Usage:
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cached_prefix_tokens: int = 0

    def add(self, other: Usage) -> None:
        self.prompt_tokens += other.prompt_tokens
        self.completion_tokens += other.completion_tokens
        self.cached_prefix_tokens += other.cached_prefix_tokens


@dataclass
class StageTiming:
    enqueue_ts: float
    dispatch_ts: float
    first_token_ts: float
    complete_ts: float

    @property
    def ttft_ms(self) -> float:
        return self.first_token_ts - self.enqueue_ts


@dataclass
class StageResult:
    stage_id: str
    content: str
    timing: StageTiming
    usage: Usage = field(default_factory=Usage)
    structured: Any = None
    tool_transcript: list[tuple[ToolCall, ToolResult]] = field(default_factory=list)
    backend_ref: str = ""
    model: str = ""
    calls: int = 0
    incomplete: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage_id": self.stage_id,
            "backend": self.backend_ref,
            "model": self.model,
            "content": self.content,
            "structured": self.structured,
            "calls": self.calls,
            "incomplete": self.incomplete,
            "usage": {
                "prompt_tokens": self.usage.prompt_tokens,
                "completion_tokens": self.usage.completion_tokens,
                "cached_prefix_tokens": self.usage.cached_prefix_tokens,
            },
            "timing": {
                "enqueue_ts": self.timing.enqueue_ts,
                "dispatch_ts": self.timing.dispatch_ts,
                "first_token_ts": self.timing.first_token_ts,
                "complete_ts": self.timing.complete_ts,
            },
            "tool_transcript": [
                {
                    "tool": call.tool_name,
                    "call_id": call.call_id,
                    "arguments": call.arguments,
                    "result": res.content,
                    "is_error": res.is_error,
                }
                for call, res in self.tool_transcript
            ],
        }


PromptBuilder = Callable[[Mapping[str, StageResult]], Union[str, Context]]


@dataclass(frozen=True)
class StageSpec:
    id: str
    backend_ref: str
    name: str = ""
    model: str | None = None
    execution_mode: ExecutionMode = ExecutionMode.SINGLE_SHOT
    max_turns: int = 8
    params: InferenceParams = field(default_factory=InferenceParams)
    tools: tuple[ToolSpec, ...] = ()
    prompt: str = ""
    prompt_builder: PromptBuilder | None = None
    scheduling_hints: SchedulingHints | None = None
    cache_policy: CachePolicy = CachePolicy.NONE
    # per-stage override of the preserve threshold
    cache_tau: int | None = None
    stage_scheduling_policy: str = "fcfs"
    request_scheduling_policy: str = "fcfs"
    # opaque values forwarded with every completion request (e.g. expected_output_tokens)
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("stage id must be non-empty")
        if not self.name:
            object.__setattr__(self, "name", self.id)
        object.__setattr__(self, "execution_mode", ExecutionMode(self.execution_mode))
        object.__setattr__(self, "cache_policy", CachePolicy(self.cache_policy))
        object.__setattr__(self, "tools", tuple(self.tools))


# --- errors -----------------------------------------------------------------


class WorkflowError(Exception):
    pass


class CycleDetected(WorkflowError):
    def __init__(self, path: list[str]):
        self.path = path
        super().__init__(f"dependency cycle: {' -> '.join(path)}")


class UnknownStage(WorkflowError):
    def __init__(self, stage_id: str):
        self.stage_id = stage_id
        super().__init__(f"unknown stage {stage_id!r}")


class UnknownBackend(WorkflowError):
    def __init__(self, ref: str, stage_id: str | None = None):
        self.ref = ref
        self.stage_id = stage_id
        super().__init__(f"unknown backend {ref!r}" + (f" (stage {stage_id!r})" if stage_id else ""))


class IncompatibleParams(WorkflowError):
    def __init__(self, stage_id: str, reason: str):
        self.stage_id = stage_id
        self.reason = reason
        super().__init__(f"stage {stage_id!r}: {reason}")


class ValidationErrors(WorkflowError):
    def __init__(self, errors: list[WorkflowError]):
        self.errors = errors
        super().__init__("; ".join(str(e) for e in errors))


class MissingUpstream(WorkflowError):
    def __init__(self, stage_id: str):
        self.stage_id = stage_id
        super().__init__(f"missing upstream result for {stage_id!r}")


class BuilderFailed(WorkflowError):
    def __init__(self, stage_id: str, cause: BaseException):
        self.stage_id = stage_id
        self.cause = cause
        super().__init__(f"prompt builder for {stage_id!r} failed: {cause!r}")


# --- workflow construction ----------------------------------------------------


class WorkflowSpec:
    """Mutable, single-owner builder for a workflow DAG."""

    def __init__(self, id: str, memory_policy: Iterable[str] | None = None):
        self.id = id
        self.stages: dict[str, StageSpec] = {}
        self.dependencies: set[tuple[str, str]] = set()
        self.memory_policy: list[str] | None = list(memory_policy) if memory_policy else None
        self._duplicates: list[str] = []

    def add_stage(self, *stages: StageSpec) -> WorkflowSpec:
        for stage in stages:
            if stage.id in self.stages:
                self._duplicates.append(stage.id)
            self.stages[stage.id] = stage
        return self

    def add_dependency(self, downstream: str, upstream: str) -> WorkflowSpec:
        """Declare that ``downstream`` runs after ``upstream`` completes."""
        self.dependencies.add((downstream, upstream))
        return self

    def set_memory_policy(self, *names: str) -> WorkflowSpec:
        self.memory_policy = list(names)
        return self

    def validate(self, registry: BackendRegistry) -> ValidatedWorkflow:
        return validate_workflow(self, registry)


@dataclass(frozen=True)
class ValidatedWorkflow:
    id: str
    stages: Mapping[str, StageSpec]
    upstream: Mapping[str, frozenset[str]]
    order: tuple[str, ...]
    memory_policy: tuple[str, ...] | None = None

    @property
    def downstream(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {s: [] for s in self.order}
        for s in self.order:
            for u in self.upstream[s]:
                out[u].append(s)
        return {k: sorted(v) for k, v in out.items()}

    def descendants(self, stage_id: str) -> set[str]:
        down = self.downstream
        seen: set[str] = set()
        stack = [stage_id]
        while stack:
            for d in down[stack.pop()]:
                if d not in seen:
                    seen.add(d)
                    stack.append(d)
        return seen

    def to_spec(self) -> WorkflowSpec:
        spec = WorkflowSpec(self.id, self.memory_policy)
        spec.add_stage(*(self.stages[s] for s in self.order))
        for s, ups in self.upstream.items():
            for u in ups:
                spec.add_dependency(s, u)
        return spec


def validate_workflow(spec: WorkflowSpec, registry: BackendRegistry) -> ValidatedWorkflow:
    """Check the DAG and backend compatibility, collecting every problem found.

    Raises:
        ValidationErrors: wrapping CycleDetected, UnknownStage, UnknownBackend
            and IncompatibleParams instances.
    """
    errors: list[WorkflowError] = []
    stages = spec.stages

    for dup in spec._duplicates:
        errors.append(IncompatibleParams(dup, "duplicate stage id"))

    upstream: dict[str, set[str]] = {sid: set() for sid in stages}
    for down, up in sorted(spec.dependencies):
        bad = False
        for endpoint in (down, up):
            if endpoint not in stages:
                errors.append(UnknownStage(endpoint))
                bad = True
        if bad:
            continue
        if down == up:
            errors.append(CycleDetected([down, down]))
            continue
        upstream[down].add(up)

    for sid in sorted(stages):
        errors.extend(_check_stage(stages[sid], registry))

    cycles = _find_cycles(upstream)
    errors.extend(CycleDetected(path) for path in cycles)
    if errors:
        raise ValidationErrors(errors)

    return ValidatedWorkflow(
        id=spec.id,
        stages=MappingProxyType(dict(stages)),
        upstream=MappingProxyType({s: frozenset(u) for s, u in upstream.items()}),
        order=tuple(_topological_order(upstream)),
        memory_policy=tuple(spec.memory_policy) if spec.memory_policy else None,
    )


def _check_stage(stage: StageSpec, registry: BackendRegistry) -> list[WorkflowError]:
    errors: list[WorkflowError] = []
    if stage.execution_mode is ExecutionMode.AGENT_LOOP and stage.max_turns < 1:
        errors.append(IncompatibleParams(stage.id, "agent loop needs max_turns >= 1"))
    if stage.execution_mode is ExecutionMode.SINGLE_SHOT and stage.tools:
        errors.append(IncompatibleParams(stage.id, "single-shot stage cannot carry tools"))
    names = [t.name for t in stage.tools]
    if len(set(names)) != len(names):
        errors.append(IncompatibleParams(stage.id, "duplicate tool names"))

    desc = registry.get(stage.backend_ref)
    if desc is None:
        errors.append(UnknownBackend(stage.backend_ref, stage.id))
        return errors
    if stage.params.max_tokens > desc.context_limit_tokens:
        errors.append(
            IncompatibleParams(
                stage.id,
                f"max_tokens {stage.params.max_tokens} exceeds context limit "
                f"{desc.context_limit_tokens} of backend {desc.ref!r}",
            )
        )
    if stage.model is not None and stage.model != desc.model:
        errors.append(
            IncompatibleParams(stage.id, f"model {stage.model!r} not served by backend {desc.ref!r} ({desc.model!r})")
        )
    return errors


def _find_cycles(upstream: Mapping[str, set[str]]) -> list[list[str]]:
    # walk in execution direction (upstream -> downstream) so paths read A, B, C, A
    down: dict[str, list[str]] = {s: [] for s in upstream}
    for s, ups in upstream.items():
        for u in ups:
            down[u].append(s)
    for v in down.values():
        v.sort()

    white, grey, black = 0, 1, 2
    color = {s: white for s in upstream}
    cycles: list[list[str]] = []
    seen_cycles: set[frozenset[str]] = set()

    for root in sorted(upstream):
        if color[root] != white:
            continue
        path: list[str] = [root]
        color[root] = grey
        stack = [iter(down[root])]
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                stack.pop()
                color[path.pop()] = black
                continue
            if color[nxt] == grey:
                cyc = path[path.index(nxt):]
                key = frozenset(cyc)
                if key not in seen_cycles:
                    seen_cycles.add(key)
                    k = cyc.index(min(cyc))
                    cyc = cyc[k:] + cyc[:k]
                    cycles.append(cyc + [cyc[0]])
            elif color[nxt] == white:
                color[nxt] = grey
                path.append(nxt)
                stack.append(iter(down[nxt]))
    return cycles


def _topological_order(upstream: Mapping[str, set[str]]) -> list[str]:
    remaining = {s: set(u) for s, u in upstream.items()}
    order: list[str] = []
    while remaining:
        layer = sorted(s for s, u in remaining.items() if not u)
        for s in layer:
            del remaining[s]
        for u in remaining.values():
            u.difference_update(layer)
        order.extend(layer)
    return order


def ready_stages(wf: ValidatedWorkflow, completed: set[str], in_flight: set[str]) -> set[str]:
    """Stages not yet started whose every upstream dependency has completed."""
    for sid in (*completed, *in_flight):
        if sid not in wf.stages:
            raise UnknownStage(sid)
    if completed & in_flight:
        raise ValueError(f"stages both completed and in flight: {sorted(completed & in_flight)}")
    taken = completed | in_flight
    return {sid for sid, ups in wf.upstream.items() if sid not in taken and ups <= completed}


def build_context(
    stage: StageSpec,
    upstream: Mapping[str, StageResult],
    depends_on: Iterable[str] | None = None,
) -> Context:
    """Construct the message list a stage is executed with.

    Without a prompt builder, upstream contents are concatenated in stage-id
    order followed by the stage's static prompt.
    """
    deps = sorted(depends_on) if depends_on is not None else sorted(upstream)
    for dep in deps:
        if dep not in upstream:
            raise MissingUpstream(dep)
    view = MappingProxyType({d: upstream[d] for d in deps})

    if stage.prompt_builder is not None:
        try:
            built = stage.prompt_builder(view)
        except Exception as exc:
            raise BuilderFailed(stage.id, exc) from exc
        if isinstance(built, str):
            return [Message("user", built)]
        return list(built)

    parts = [view[d].content for d in deps] + [stage.prompt]
    return [Message("user", "\n\n".join(p for p in parts if p))]


def context_text(context: Context) -> str:
    return "\n".join(m.content for m in context)
