"""Bundled workflow templates.

A template turns one trace record into a validated workflow plus the
metadata forwarded with its completion requests. Templates that need model
replies with a particular shape (tool calls, structured JSON) also provide a
script that simulated backends consult before falling back to filler output.
"""

from __future__ import annotations

import json
from typing import Any, Callable, Mapping

from stageflow.backends.base import CompletionRequest
from stageflow.backends.simulated import ScriptedReply
from stageflow.mapper import BackendRegistry
from stageflow.workflow import (
    ExecutionMode,
    InferenceParams,
    SchedulingHints,
    StageResult,
    StageSpec,
    ToolSpec,
    ValidatedWorkflow,
    WorkflowSpec,
)

Script = Callable[[CompletionRequest], "ScriptedReply | None"]


def filler(n: int, tag: str) -> str:
    """``n`` distinct whitespace tokens."""
    return " ".join(f"{tag}{i}" for i in range(n))


class Template:
    name = ""

    def __init__(self, options: Mapping[str, Any] | None = None):
        self.options = dict(options or {})

    def opt(self, key: str, default: Any) -> Any:
        return self.options.get(key, default)

    def spec(self, payload: Mapping[str, Any]) -> WorkflowSpec:
        raise NotImplementedError

    def instantiate(self, payload: Mapping[str, Any], registry: BackendRegistry) -> tuple[ValidatedWorkflow, dict]:
        metadata = {k: v for k, v in payload.items() if k != "prompt"}
        metadata["template"] = self.name
        return self.spec(payload).validate(registry), metadata

    def script(self) -> Script | None:
        return None


class SingleShotPatch(Template):
    """One single-shot stage asking for a unified diff."""

    name = "single_shot_patch"

    def spec(self, payload: Mapping[str, Any]) -> WorkflowSpec:
        body = payload.get("prompt") or filler(int(payload.get("prompt_tokens", 200)), "src")
        stage = StageSpec(
            "patch",
            self.opt("backend", "heavy"),
            params=InferenceParams(0.0, int(self.opt("max_tokens", 4096))),
            prompt="Generate a unified diff that fixes the bug in the files below.\n\n" + body,
            cache_policy=self.opt("cache_policy", "none"),
        )
        return WorkflowSpec(self.name).add_stage(stage)


class MathChain(Template):
    """``k`` sequential stages on one backend; stage i sees the base context plus steps 1..i."""

    name = "math_chain_k"

    def spec(self, payload: Mapping[str, Any]) -> WorkflowSpec:
        k = int(payload.get("k", self.opt("k", 5)))
        base = filler(int(self.opt("base_tokens", 1000)), "b")
        step = int(self.opt("step_tokens", 50))
        ref = self.opt("backend", "heavy")
        params = InferenceParams(0.0, int(self.opt("max_tokens", 256)))
        policy = self.opt("cache_policy", "none")

        spec = WorkflowSpec(self.name)
        for i in range(1, k + 1):
            text = "\n".join([base] + [filler(step, f"s{j}_") for j in range(1, i + 1)])
            spec.add_stage(StageSpec(f"step{i}", ref, params=params, prompt=text, cache_policy=policy,
                                     prompt_builder=lambda _up, text=text: text))
            if i > 1:
                spec.add_dependency(f"step{i}", f"step{i - 1}")
        return spec


POLICY_TEXT = {
    "billing": "Refunds within 30 days are approved without escalation.",
    "technical": "Outages affecting paid plans are escalated to on-call engineering.",
    "account": "Account ownership changes require identity verification.",
    "general": "General questions are answered from the public knowledge base.",
}

TEAMS = {
    "billing": "payments",
    "technical": "platform",
    "account": "identity",
    "general": "support",
}

CLASSIFY_SCHEMA = {
    "type": "json_schema",
    "json_schema": {
        "name": "ticket_classify",
        "schema": {
            "type": "object",
            "properties": {
                "category": {"type": "string"},
                "needs_escalation": {"type": "boolean"},
            },
            "required": ["category", "needs_escalation"],
        },
    },
}


def _classification(upstream: Mapping[str, StageResult]) -> dict:
    data = upstream["classify"].structured
    return data if isinstance(data, dict) else {}


def ticket_priority(upstream: Mapping[str, StageResult]) -> int:
    """Billing and technical tickets jump ahead of everything else."""
    return 8 if _classification(upstream).get("category") in ("billing", "technical") else 5


def read_policy_yaml(args: Any) -> str:
    section = (args or {}).get("section", "general")
    return POLICY_TEXT.get(section, POLICY_TEXT["general"])


def read_team_descriptions(args: Any) -> str:
    return "; ".join(f"{team}: handles {cat} tickets" for cat, team in sorted(TEAMS.items()))


def send_email(args: Any) -> str:
    if not isinstance(args, dict) or not args.get("to"):
        raise ValueError("send_email needs a recipient")
    return "sent"


class CustomerSupport(Template):
    """classify (light) then policy_check -> reply and route_ticket (heavy)."""

    name = "customer_support"

    def spec(self, payload: Mapping[str, Any]) -> WorkflowSpec:
        light = self.opt("light", "light")
        heavy = self.opt("heavy", "heavy")
        latency = float(self.opt("tool_latency_ms", 50.0))
        max_tokens = int(self.opt("max_tokens", 256))
        overrides = self.opt("cache_policies", {}) or {}
        ticket = payload.get("ticket") or filler(int(payload.get("prompt_tokens", 80)), "t")
        hints = SchedulingHints(priority_fn=ticket_priority)

        def policy_prompt(up):
            return (
                "Review this classification against company policy.\n"
                f"Classification: {up['classify'].content}\nTicket: {ticket}"
            )

        def reply_prompt(up):
            lead = "Escalate and tell the customer." if _classification(up).get("needs_escalation") else "Resolve directly."
            return f"{lead}\nPolicy findings: {up['policy_check'].content}\nTicket: {ticket}"

        def route_prompt(up):
            return f"Pick the internal team for this ticket.\nClassification: {up['classify'].content}"

        def stage(sid, ref, **kw):
            return StageSpec(sid, ref, params=InferenceParams(0.0, max_tokens, kw.pop("response_format", None)),
                             cache_policy=overrides.get(sid, "none"), **kw)

        spec = WorkflowSpec(self.name)
        spec.add_stage(
            stage("classify", light, prompt=f"Classify this support ticket.\nTicket: {ticket}",
                  response_format=CLASSIFY_SCHEMA, stage_scheduling_policy="priority",
                  request_scheduling_policy="fifo"),
            stage("policy_check", heavy, execution_mode=ExecutionMode.AGENT_LOOP, prompt_builder=policy_prompt,
                  tools=(ToolSpec("read_policy_yaml", read_policy_yaml, latency_ms=latency),),
                  scheduling_hints=hints, stage_scheduling_policy="priority", request_scheduling_policy="priority"),
            stage("reply", heavy, execution_mode=ExecutionMode.AGENT_LOOP, prompt_builder=reply_prompt,
                  tools=(ToolSpec("send_email", send_email, latency_ms=latency),),
                  scheduling_hints=hints, stage_scheduling_policy="priority", request_scheduling_policy="priority"),
            stage("route_ticket", heavy, execution_mode=ExecutionMode.AGENT_LOOP, prompt_builder=route_prompt,
                  tools=(ToolSpec("read_team_descriptions", read_team_descriptions, latency_ms=latency),),
                  scheduling_hints=hints, stage_scheduling_policy="priority", request_scheduling_policy="priority"),
        )
        spec.add_dependency("policy_check", "classify")
        spec.add_dependency("reply", "policy_check")
        spec.add_dependency("reply", "classify")
        spec.add_dependency("route_ticket", "classify")
        return spec

    def script(self) -> Script:
        def reply(req: CompletionRequest) -> ScriptedReply | None:
            md = req.metadata
            if md.get("template") != self.name or md.get("purpose") != "stage":
                return None
            category = md.get("category", "general")
            stage, turn = md.get("stage_id"), int(md.get("turn", 0))
            if stage == "classify":
                body = {"category": category, "needs_escalation": category == "technical"}
                return ScriptedReply(json.dumps(body, sort_keys=True))
            if stage == "policy_check":
                if turn == 0:
                    return ScriptedReply(tool_calls=(("read_policy_yaml", {"section": category}),))
                return ScriptedReply(f"Policy for {category} tickets reviewed; handling is permitted.")
            if stage == "reply":
                if turn == 0:
                    to = md.get("customer", "customer@example.com")
                    return ScriptedReply(tool_calls=(("send_email", {"to": to, "body": "We are on it."}),))
                return ScriptedReply("Reply sent to the customer.")
            if stage == "route_ticket":
                if turn == 0:
                    return ScriptedReply(tool_calls=(("read_team_descriptions", {}),))
                return ScriptedReply(f"Routed to the {TEAMS.get(category, 'support')} team.")
            return None

        return reply


TEMPLATES: dict[str, type[Template]] = {
    t.name: t for t in (SingleShotPatch, MathChain, CustomerSupport)
}


def make_templates(options: Mapping[str, Mapping[str, Any]] | None = None) -> dict[str, Template]:
    """One instance of every bundled template, configured from ``options`` by name."""
    options = options or {}
    unknown = sorted(set(options) - set(TEMPLATES))
    if unknown:
        raise KeyError(f"unknown template(s) in config: {', '.join(unknown)}")
    return {name: cls(options.get(name)) for name, cls in TEMPLATES.items()}


def classifier_script(req: CompletionRequest) -> ScriptedReply | None:
    """Answer routing calls with the complexity label the trace carries."""
    if req.metadata.get("purpose") != "classify":
        return None
    label = req.metadata.get("complexity")
    if label is None:
        return None
    return ScriptedReply(str(label), output_tokens=1)
