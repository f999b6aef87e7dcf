"""Stage mapping: explicit plans plus per-request threshold and one-bit routers."""

from __future__ import annotations

import enum
import logging
import math
import re
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Callable, Iterable, Mapping

from stageflow.workflow import Context, Message, ValidatedWorkflow, context_text

if TYPE_CHECKING:
    from stageflow.backends.base import Backend

logger = logging.getLogger(__name__)


class BackendKind(str, enum.Enum):
    SIMULATED = "simulated"
    HTTP = "http"


class Tier(str, enum.Enum):
    LIGHT = "light"
    HEAVY = "heavy"


@dataclass(frozen=True)
class Price:
    input_per_1m: float = 0.0
    output_per_1m: float = 0.0

    def __post_init__(self):
        if self.input_per_1m < 0 or self.output_per_1m < 0:
            raise ValueError("prices must be non-negative")


@dataclass(frozen=True)
class BackendDescriptor:
    ref: str
    model: str
    kind: BackendKind = BackendKind.SIMULATED
    endpoint_url: str = ""
    context_limit_tokens: int = 32768
    price: Price = field(default_factory=Price)
    tier: Tier = Tier.HEAVY

    def __post_init__(self):
        if self.context_limit_tokens <= 0:
            raise ValueError("context_limit_tokens must be positive")
        object.__setattr__(self, "kind", BackendKind(self.kind))
        object.__setattr__(self, "tier", Tier(self.tier))


class BackendRegistry:
    def __init__(self, descriptors: Iterable[BackendDescriptor] = ()):
        self._by_ref: dict[str, BackendDescriptor] = {}
        for d in descriptors:
            self.add(d)

    def add(self, desc: BackendDescriptor) -> None:
        if desc.ref in self._by_ref:
            raise ValueError(f"backend {desc.ref!r} already registered")
        self._by_ref[desc.ref] = desc

    def get(self, ref: str) -> BackendDescriptor | None:
        return self._by_ref.get(ref)

    def __getitem__(self, ref: str) -> BackendDescriptor:
        return self._by_ref[ref]

    def __contains__(self, ref: object) -> bool:
        return ref in self._by_ref

    def __iter__(self):
        return iter(self._by_ref.values())

    def refs(self) -> list[str]:
        return list(self._by_ref)


class Complexity(str, enum.Enum):
    SIMPLE = "simple"
    COMPLEX = "complex"


@dataclass(frozen=True)
class ComplexityLabel:
    value: Complexity | None
    raw_classifier_output: str
    error: str | None = None


@dataclass(frozen=True)
class Provenance:
    """How a stage got its backend: ``explicit``, ``one_bit`` or ``threshold``."""

    kind: str
    label: ComplexityLabel | None = None
    score: float | None = None

    def describe(self) -> str:
        if self.kind == "one_bit" and self.label is not None:
            return f"one_bit({self.label.value.value if self.label.value else 'unparseable'})"
        if self.kind == "threshold":
            return f"threshold({self.score:g})"
        return self.kind


EXPLICIT = Provenance("explicit")


class Router:
    """Per-request mapper applied when a stage is dispatched."""

    async def route(self, context: Context, metadata: Mapping[str, Any]) -> tuple[str, Provenance]:
        raise NotImplementedError

    def refs(self) -> tuple[str, ...]:
        raise NotImplementedError


@dataclass
class MappingPlan:
    assignments: dict[str, str] = field(default_factory=dict)
    provenance: dict[str, Provenance] = field(default_factory=dict)
    routers: dict[str, Router] = field(default_factory=dict)

    async def resolve(
        self, stage_id: str, context: Context, metadata: Mapping[str, Any] | None = None
    ) -> tuple[str, Provenance]:
        router = self.routers.get(stage_id)
        if router is None:
            return self.assignments[stage_id], self.provenance[stage_id]
        return await router.route(context, metadata or {})


def plan_explicit(wf: ValidatedWorkflow, registry: BackendRegistry) -> MappingPlan:
    plan = MappingPlan()
    for sid in wf.order:
        ref = wf.stages[sid].backend_ref
        if ref not in registry:
            raise KeyError(f"stage {sid!r} mapped to unregistered backend {ref!r}")
        plan.assignments[sid] = ref
        plan.provenance[sid] = EXPLICIT
    return plan


def with_router(plan: MappingPlan, router: Router, stages: Iterable[str]) -> MappingPlan:
    """Attach ``router`` to the named stages of an explicit plan."""
    for sid in stages:
        if sid not in plan.assignments:
            raise KeyError(f"stage {sid!r} not in plan")
        plan.routers[sid] = router
    return plan


# --- threshold routing ----------------------------------------------------------


class ScoreFnFailed(Exception):
    def __init__(self, cause: BaseException):
        self.cause = cause
        super().__init__(f"score function failed: {cause!r}")


def prompt_length(context: Context) -> float:
    from stageflow.backends.simulated import tokenize_sim

    return float(len(tokenize_sim(context_text(context))))


def map_threshold(
    request: Context,
    score_fn: Callable[[Context], float],
    threshold: float,
    light: str,
    heavy: str,
) -> tuple[str, float]:
    """Light iff ``score_fn(request) <= threshold``."""
    if light == heavy:
        raise ValueError("light and heavy backends must differ")
    if not math.isfinite(threshold):
        raise ValueError("threshold must be finite")
    try:
        score = float(score_fn(request))
    except Exception as exc:
        raise ScoreFnFailed(exc) from exc
    return (light if score <= threshold else heavy), score


@dataclass
class ThresholdMapper(Router):
    light: str
    heavy: str
    threshold: float
    score_fn: Callable[[Context], float] = prompt_length

    async def route(self, context: Context, metadata: Mapping[str, Any]) -> tuple[str, Provenance]:
        ref, score = map_threshold(context, self.score_fn, self.threshold, self.light, self.heavy)
        return ref, Provenance("threshold", score=score)

    def refs(self) -> tuple[str, ...]:
        return (self.light, self.heavy)


# --- one-bit LLM routing ----------------------------------------------------------

CLASSIFY_PROMPT = (
    "Decide whether the following request is simple or complex to answer. "
    "Reply with a single word: simple or complex.\n\n"
    "Request:\n{request}"
)

_LABEL_RE = re.compile(r"simple|complex", re.IGNORECASE)


def parse_label(raw: str) -> Complexity | None:
    """Earliest case-insensitive occurrence of ``simple`` or ``complex``."""
    m = _LABEL_RE.search(raw or "")
    if m is None:
        return None
    return Complexity(m.group(0).lower())


async def map_one_bit(
    request: Context,
    classifier: Backend,
    light: str,
    heavy: str,
    *,
    prompt_template: str = CLASSIFY_PROMPT,
    metadata: Mapping[str, Any] | None = None,
) -> tuple[str, ComplexityLabel]:
    """Route with one classification call on ``classifier``; failures go heavy."""
    from stageflow.backends.base import BackendError, CompletionRequest

    if light == heavy:
        raise ValueError("light and heavy backends must differ")
    req = CompletionRequest(
        model=classifier.model,
        messages=[Message("user", prompt_template.format(request=context_text(request)))],
        temperature=0.0,
        max_tokens=8,
        metadata={**(metadata or {}), "purpose": "classify"},
    )
    try:
        resp = await classifier.complete(req)
    except BackendError as exc:
        logger.warning("classifier %s unreachable, routing to heavy: %s", classifier.ref, exc)
        return heavy, ComplexityLabel(None, "", error=f"ClassifierUnreachable: {exc}")

    value = parse_label(resp.content)
    if value is None:
        return heavy, ComplexityLabel(None, resp.content, error="UnparseableLabel")
    return (light if value is Complexity.SIMPLE else heavy), ComplexityLabel(value, resp.content)


@dataclass
class OneBitMapper(Router):
    classifier: Backend
    light: str
    heavy: str
    prompt_template: str = CLASSIFY_PROMPT

    async def route(self, context: Context, metadata: Mapping[str, Any]) -> tuple[str, Provenance]:
        ref, label = await map_one_bit(
            context,
            self.classifier,
            self.light,
            self.heavy,
            prompt_template=self.prompt_template,
            metadata=metadata,
        )
        return ref, Provenance("one_bit", label=label)

    def refs(self) -> tuple[str, ...]:
        return (self.light, self.heavy)
