from __future__ import annotations

import pytest

from stageflow.backends.simulated import OutputTokens, SimulatedBackend, SimulatedBackendConfig
from stageflow.clock import VirtualClock
from stageflow.mapper import BackendDescriptor, BackendRegistry, Tier


def sim_config(prefill=1.0, decode=10.0, overhead=0.0, concurrency=1, out=10, rule="constant", capacity=1_000_000):
    return SimulatedBackendConfig(
        prefill_ms_per_token=prefill,
        decode_ms_per_token=decode,
        fixed_overhead_ms=overhead,
        max_concurrency=concurrency,
        cache_capacity_tokens=capacity,
        output_tokens=OutputTokens(rule, out),
    )


def make_sim(clock, ref="heavy", model=None, **kw) -> SimulatedBackend:
    return SimulatedBackend(ref, model or f"{ref}-model", sim_config(**kw), clock)


def registry_for(*backends) -> BackendRegistry:
    return BackendRegistry(
        BackendDescriptor(b.ref, b.model, tier=Tier.LIGHT if b.ref == "light" else Tier.HEAVY) for b in backends
    )


@pytest.fixture
def clock():
    return VirtualClock()


def words(n: int, tag: str = "w") -> str:
    return " ".join(f"{tag}{i}" for i in range(n))


# -- wire fixtures --------------------------------------------------------------

from pathlib import Path  # noqa: E402

from stageflow.backends.base import CompletionRequest, tool_schema  # noqa: E402
from stageflow.workflow import Message, ToolCall  # noqa: E402

WIRE = Path(__file__).parent / "fixtures" / "wire"

_TICKET = "Review this classification against company policy.\nClassification: {\"category\": \"billing\"}"
_POLICY_TOOL = tool_schema(
    "read_policy_yaml",
    {"type": "object", "properties": {"section": {"type": "string"}}, "required": ["section"]},
    "Read one section of the policy file.",
)


def wire_cases() -> dict[str, tuple[CompletionRequest, dict]]:
    """Request objects matching the recorded fixtures, plus what parsing the recorded reply must give."""
    call = ToolCall("read_policy_yaml", {"section": "billing"}, "call_7Qm2")
    return {
        "plain": (
            CompletionRequest(
                "llama-3.1-8b-instruct",
                [
                    Message("system", "You are a support triage assistant."),
                    Message("user", "Summarize this ticket in one sentence.\n"
                                    "Ticket: I was charged twice for the March invoice."),
                ],
                temperature=0.0,
                max_tokens=64,
            ),
            {"content": "The customer was billed twice for the March invoice and wants a refund.",
             "tool_calls": [], "usage": (0, 0, 0)},
        ),
        "tool_call": (
            CompletionRequest("qwen2.5-32b-instruct", [Message("user", _TICKET)], temperature=0.2,
                              max_tokens=256, tools=[_POLICY_TOOL]),
            {"content": "", "tool_calls": [call], "usage": (212, 19, 0)},
        ),
        "usage": (
            CompletionRequest(
                "qwen2.5-32b-instruct",
                [
                    Message("user", _TICKET),
                    Message("assistant", "", tool_calls=(call,)),
                    Message("tool", "Refunds within 30 days are approved without escalation.",
                            tool_call_id="call_7Qm2"),
                ],
                temperature=0.2,
                max_tokens=256,
                response_format={"type": "json_object"},
            ),
            {"content": '{"decision": "refund", "escalate": false}', "tool_calls": [], "usage": (248, 14, 212)},
        ),
    }


# -- random DAG workflows ---------------------------------------------------------

import random  # noqa: E402

from stageflow.workflow import InferenceParams, StageSpec, WorkflowSpec  # noqa: E402


def random_dag_spec(rng: random.Random, name: str, refs=("heavy",), max_nodes: int = 20) -> WorkflowSpec:
    """Random DAG: each stage depends on a random subset of earlier ones and has a random prompt length."""
    n = rng.randint(1, max_nodes)
    spec = WorkflowSpec(name)
    for i in range(n):
        text = words(rng.randint(1, 60), f"{name}s{i}_")
        spec.add_stage(StageSpec(f"s{i:02d}", rng.choice(refs), params=InferenceParams(0.0, rng.randint(1, 20)),
                                 prompt_builder=lambda _up, text=text: text))
    for i in range(1, n):
        for j in rng.sample(range(i), k=rng.randint(0, min(i, 3))):
            spec.add_dependency(f"s{i:02d}", f"s{j:02d}")
    return spec


def causal_violations(wf, report, signals) -> list[str]:
    """Dependency and signal-order violations for one executed workflow."""
    problems = []
    for sid, r in report.results.items():
        for u in wf.upstream[sid]:
            if r.timing.dispatch_ts < report.results[u].timing.complete_ts:
                problems.append(f"{sid} dispatched before {u} completed")
    mine = [s for s in signals if s.workflow_id == report.workflow_id]
    kinds = [s.kind.value for s in mine]
    if kinds.count("workflow_complete") != 1 or kinds[-1] != "workflow_complete":
        problems.append(f"bad workflow_complete placement: {kinds}")
    pos = {(s.kind.value, s.stage_id): i for i, s in enumerate(mine)}
    for sid in report.results:
        start = pos.get(("stage_start", sid))
        done = pos.get(("stage_complete", sid))
        if start is None or done is None or start > done:
            problems.append(f"{sid}: start/complete out of order")
            continue
        for u in wf.upstream[sid]:
            if pos.get(("stage_complete", u), len(mine)) > start:
                problems.append(f"{sid} started before {u} completed")
    return problems


# -- lifecycle signals ------------------------------------------------------------

from stageflow.signals import LifecycleSignal, SignalKind  # noqa: E402

MODELS = {"light": "small-model", "heavy": "large-model"}


def start(wid, sid, ref, tokens, ts=0.0, **kw):
    return LifecycleSignal(SignalKind.STAGE_START, wid, ts, sid, ref, MODELS.get(ref, ref), tokens, **kw)


def complete(wid, sid, ref, tokens, ts=0.0):
    return LifecycleSignal(SignalKind.STAGE_COMPLETE, wid, ts, sid, ref, MODELS.get(ref, ref), tokens)


def done(wid, ts=0.0):
    return LifecycleSignal(SignalKind.WORKFLOW_COMPLETE, wid, ts)


def support_signals(wid="W1"):
    """classify on light, then policy_check, reply and route_ticket on heavy, one after another."""
    out = []
    for i, (sid, ref, tokens) in enumerate((("classify", "light", 120), ("policy_check", "heavy", 300),
                                            ("reply", "heavy", 420), ("route_ticket", "heavy", 1200))):
        out += [start(wid, sid, ref, tokens, ts=10.0 * i), complete(wid, sid, ref, tokens, ts=10.0 * i + 5)]
    return out + [done(wid, 50.0)]


def random_tracker(rng: random.Random, refs=("a", "b", "c"), n_workflows=8):
    """Tracker with random entries, preservation flags, timestamps and in-flight counts."""
    from stageflow.memory import CacheEntry, WorkflowTracker

    t = WorkflowTracker()
    for i in range(n_workflows):
        wid = f"w{i}"
        for b in refs:
            if rng.random() < 0.6:
                tokens = rng.randint(1, 500)
                t.entries[(wid, b)] = CacheEntry(wid, b, "m", tokens, preserved=rng.random() < 0.7,
                                                 last_update_ts=float(rng.randint(0, 20)))
            if rng.random() < 0.3:
                t.in_flight.setdefault(b, {})[wid] = rng.randint(1, 3)
    return t
