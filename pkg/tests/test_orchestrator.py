import asyncio
import json
import random

import pytest
from conftest import causal_violations, make_sim, random_dag_spec, registry_for, words

from stageflow.backends.base import EmptyPrompt
from stageflow.backends.simulated import ScriptedReply
from stageflow.clock import VirtualClock
from stageflow.mapper import plan_explicit
from stageflow.orchestrator import (
    MaxTurnsExceeded,
    Orchestrator,
    ToolNotFound,
    execute_tool,
    execute_workflow,
    reroute_on_overload,
    run_agent_loop,
    run_stage,
)
from stageflow.scheduler import BackendQueue, QueuedRequest
from stageflow.signals import SignalKind
from stageflow.workflow import (
    ExecutionMode,
    InferenceParams,
    Message,
    StageSpec,
    ToolCall,
    ToolSpec,
    WorkflowSpec,
)


def fixed(text):
    return lambda _up: text


def run_one(clock, backends, spec, **kw):
    wf = spec.validate(registry_for(*backends.values()))
    orch = Orchestrator(backends, clock, **kw)

    async def main():
        return await orch.execute_workflow(wf, plan_explicit(wf, registry_for(*backends.values())), "w1")

    return clock.run(main()), orch, wf


def test_single_stage_signal_order(clock):
    b = make_sim(clock)
    spec = WorkflowSpec("one").add_stage(StageSpec("only", "heavy", prompt="hello there"))
    report, orch, _ = run_one(clock, {"heavy": b}, spec)
    assert list(report.results) == ["only"]
    assert [s.kind for s in orch.signals] == [SignalKind.STAGE_START, SignalKind.STAGE_COMPLETE,
                                             SignalKind.WORKFLOW_COMPLETE]
    assert report.status == {"only": "completed"}


def test_chain_makespan_is_sum_of_stage_latencies(clock):
    # 100 prompt tokens at 1 ms/token and no output: 100 ms per stage
    b = make_sim(clock, prefill=1, decode=1, out=0)
    spec = WorkflowSpec("chain")
    for i in range(3):
        spec.add_stage(StageSpec(f"s{i}", "heavy", prompt_builder=fixed(words(100, f"s{i}_"))))
    spec.add_dependency("s1", "s0").add_dependency("s2", "s1")
    report, _, _ = run_one(clock, {"heavy": b}, spec)
    assert report.makespan_ms == 300
    assert [report.results[s].timing.complete_ts for s in ("s0", "s1", "s2")] == [100, 200, 300]


def support_dag():
    spec = WorkflowSpec("support")
    spec.add_stage(
        StageSpec("classify", "light", prompt="Classify: refund please"),
        StageSpec("policy_check", "heavy", prompt="check policy"),
        StageSpec("reply", "heavy", prompt="write reply"),
        StageSpec("route_ticket", "heavy", prompt="route it"),
    )
    spec.add_dependency("policy_check", "classify").add_dependency("reply", "policy_check")
    spec.add_dependency("route_ticket", "classify")
    return spec


def test_independent_stages_run_concurrently(clock):
    backends = {"light": make_sim(clock, "light"), "heavy": make_sim(clock, "heavy", concurrency=2)}
    report, orch, _ = run_one(clock, backends, support_dag())
    assert set(report.results) == {"classify", "policy_check", "reply", "route_ticket"}
    order = [(s.kind, s.stage_id) for s in orch.signals]
    starts = [order.index((SignalKind.STAGE_START, s)) for s in ("policy_check", "route_ticket")]
    completes = [order.index((SignalKind.STAGE_COMPLETE, s)) for s in ("policy_check", "route_ticket")]
    assert max(starts) < min(completes)
    pc, rt = report.results["policy_check"].timing, report.results["route_ticket"].timing
    assert pc.dispatch_ts == rt.dispatch_ts


def test_failure_aborts_descendants_only(clock):
    def boom(_up):
        raise RuntimeError("builder exploded")

    spec = WorkflowSpec("f")
    spec.add_stage(StageSpec("a", "heavy", prompt_builder=boom), StageSpec("b", "heavy", prompt="b"),
                   StageSpec("c", "heavy", prompt="independent"))
    spec.add_dependency("b", "a")
    report, orch, _ = run_one(clock, {"heavy": make_sim(clock)}, spec)
    assert report.status == {"a": "failed", "b": "aborted", "c": "completed"}
    assert "builder exploded" in report.errors["a"]
    assert not report.ok
    assert orch.signals[-1].kind is SignalKind.WORKFLOW_COMPLETE


def test_empty_prompt_fails_stage(clock):
    spec = WorkflowSpec("e").add_stage(StageSpec("a", "heavy", prompt="   "))
    report, _, _ = run_one(clock, {"heavy": make_sim(clock)}, spec)
    assert report.status == {"a": "failed"}
    assert "EmptyPrompt" in report.errors["a"]


def test_random_dags_respect_dependencies():
    rng = random.Random(11)
    for trial in range(30):
        clock = VirtualClock()
        backends = {"light": make_sim(clock, "light", concurrency=rng.randint(1, 3), prefill=rng.uniform(0.1, 2)),
                    "heavy": make_sim(clock, "heavy", concurrency=rng.randint(1, 3), decode=rng.uniform(1, 20))}
        reg = registry_for(*backends.values())
        wfs = [random_dag_spec(rng, f"t{trial}d{i}", ("light", "heavy")).validate(reg) for i in range(5)]
        orch = Orchestrator(backends, clock)

        async def main():
            return await asyncio.gather(*(orch.execute_workflow(wf, plan_explicit(wf, reg), wf.id) for wf in wfs))

        for wf, report in zip(wfs, clock.run(main())):
            assert set(report.results) == set(wf.stages)
            assert causal_violations(wf, report, orch.signals) == []


def test_report_is_deterministic():
    def once():
        clock = VirtualClock()
        backends = {"light": make_sim(clock, "light"), "heavy": make_sim(clock, "heavy", concurrency=2)}
        report, orch, _ = run_one(clock, backends, support_dag())
        return json.dumps(report.to_dict(), sort_keys=True), [s.to_dict() for s in orch.signals]

    assert once() == once()


# -- run_stage ---------------------------------------------------------------------

def test_run_stage_ttft_example(clock):
    b = make_sim(clock, prefill=2, decode=20, out=30)
    stage = StageSpec("s", "heavy")
    r = clock.run(run_stage(stage, [Message("user", words(120))], b, clock))
    assert r.timing.first_token_ts - r.timing.dispatch_ts == 240
    assert r.timing.complete_ts - r.timing.dispatch_ts == 840


def test_run_stage_structured_output(clock):
    b = make_sim(clock)
    stage = StageSpec("classify", "heavy", params=InferenceParams(response_format={"type": "json_object"}))
    r = clock.run(run_stage(stage, [Message("user", "classify this")], b, clock))
    assert r.structured and isinstance(r.structured, dict)


def test_run_stage_empty_prompt(clock):
    with pytest.raises(EmptyPrompt):
        clock.run(run_stage(StageSpec("s", "heavy"), [Message("user", "")], make_sim(clock), clock))


# -- agent loop --------------------------------------------------------------------

def agent(max_turns=8, tools=()):
    return StageSpec("agent", "heavy", execution_mode=ExecutionMode.AGENT_LOOP, max_turns=max_turns, tools=tools)


def lookup_tool(latency=0.0):
    return ToolSpec("read_policy_yaml", lambda args: f"policy for {args['section']}", latency_ms=latency)


def test_agent_loop_one_tool_call_then_answer(clock):
    b = make_sim(clock)
    b.add_script({("agent", 0): ScriptedReply(tool_calls=(("read_policy_yaml", {"section": "billing"}),)),
                  ("agent", 1): ScriptedReply("approved")})
    r = clock.run(run_agent_loop(agent(tools=(lookup_tool(),)), [Message("user", "check")], b, clock))
    assert (r.calls, len(r.tool_transcript), r.content) == (2, 1, "approved")
    assert r.tool_transcript[0][1].content == "policy for billing"
    assert b.calls == 2


def test_agent_loop_without_tool_calls(clock):
    b = make_sim(clock)
    r = clock.run(run_agent_loop(agent(), [Message("user", "hi")], b, clock))
    assert (r.calls, r.tool_transcript) == (1, [])


def test_agent_loop_max_turns(clock):
    b = make_sim(clock)
    b.add_script(lambda req: ScriptedReply(tool_calls=(("read_policy_yaml", {"section": "x"}),)))
    with pytest.raises(MaxTurnsExceeded) as info:
        clock.run(run_agent_loop(agent(max_turns=3, tools=(lookup_tool(),)), [Message("user", "go")], b, clock))
    assert len(info.value.result.tool_transcript) == 3
    assert info.value.result.incomplete


def test_agent_loop_unknown_tool(clock):
    b = make_sim(clock)
    b.add_script({("agent", 0): ScriptedReply(tool_calls=(("no_such_tool", {}),))})
    with pytest.raises(ToolNotFound):
        clock.run(run_agent_loop(agent(), [Message("user", "go")], b, clock))


def test_agent_loop_feeds_tool_errors_back(clock):
    def broken(args):
        raise KeyError("section")

    seen = []
    b = make_sim(clock)
    b.add_script({("agent", 0): ScriptedReply(tool_calls=(("read_policy_yaml", {}),))})
    b.add_script(lambda req: seen.append(req.messages) or None)
    r = clock.run(run_agent_loop(agent(tools=(ToolSpec("read_policy_yaml", broken),)), [Message("user", "go")],
                                 b, clock))
    assert r.tool_transcript[0][1].is_error
    last = seen[-1][-1]
    assert last.role == "tool" and "KeyError" in last.content


def test_incomplete_stage_in_workflow(clock):
    b = make_sim(clock)
    b.add_script(lambda req: ScriptedReply(tool_calls=(("read_policy_yaml", {"section": "x"}),)))
    spec = WorkflowSpec("loop").add_stage(
        StageSpec("agent", "heavy", prompt="go", execution_mode=ExecutionMode.AGENT_LOOP, max_turns=2,
                  tools=(lookup_tool(),)))
    report, _, _ = run_one(clock, {"heavy": b}, spec)
    assert report.status == {"agent": "incomplete"}
    assert report.ok and report.results["agent"].calls == 2


def test_tool_wait_holds_no_backend_slot(clock):
    b = make_sim(clock, prefill=1, decode=1, out=0, concurrency=1)
    b.add_script({("agent", 0): ScriptedReply(tool_calls=(("read_policy_yaml", {"section": "s"}),), output_tokens=0),
                  ("agent", 1): ScriptedReply("done", output_tokens=0)})
    reg = registry_for(b)
    w1 = WorkflowSpec("w1").add_stage(StageSpec("agent", "heavy", prompt=words(10), tools=(lookup_tool(500),),
                                                execution_mode=ExecutionMode.AGENT_LOOP)).validate(reg)
    w2 = WorkflowSpec("w2").add_stage(StageSpec("single", "heavy", prompt=words(20))).validate(reg)
    orch = Orchestrator({"heavy": b}, clock)

    async def main():
        async def late():
            await clock.sleep(20)
            return await orch.execute_workflow(w2, plan_explicit(w2, reg), "W2")

        return await asyncio.gather(orch.execute_workflow(w1, plan_explicit(w1, reg), "W1"), late())

    r1, r2 = clock.run(main())
    # W1's first call ends at 10 ms, its tool runs 10..510 ms; W2 is served inside that window
    d2 = r2.results["single"].timing.dispatch_ts
    assert 10 <= d2 < 510
    assert r2.results["single"].timing.complete_ts == d2 + 20
    assert r1.results["agent"].timing.complete_ts > 510


# -- execute_tool --------------------------------------------------------------------

def run(coro):
    return asyncio.run(coro)


def test_execute_tool_send_email():
    tool = ToolSpec("send_email", lambda a: "sent")
    res = run(execute_tool(ToolCall("send_email", {"to": "a@b.c", "body": "hi"}, "c1"), {"send_email": tool}))
    assert (res.call_id, res.content, res.is_error) == ("c1", "sent", False)


def test_execute_tool_unknown():
    with pytest.raises(ToolNotFound):
        run(execute_tool(ToolCall("nope", {}, "c1"), {}))


def test_execute_tool_handler_error_and_async_and_json():
    async def coro(args):
        return {"ok": True, "n": args["n"]}

    reg = {"bad": ToolSpec("bad", lambda a: 1 / 0), "good": ToolSpec("good", coro)}
    bad = run(execute_tool(ToolCall("bad", {}, "c"), reg))
    assert bad.is_error and "ZeroDivisionError" in bad.content
    good = run(execute_tool(ToolCall("good", {"n": 2}, "d"), reg))
    assert good.content == '{"n": 2, "ok": true}'


# -- rerouting -----------------------------------------------------------------------

def queue_with(ref, depth):
    q = BackendQueue(ref)
    for i in range(depth):
        q.enqueue(QueuedRequest(f"{ref}{i}", "w", "s", float(i)))
    return q


@pytest.mark.parametrize("primary,alt,expected", [(3, 0, "primary"), (12, 1, "alt"), (12, 11, "primary")])
def test_reroute_on_overload(primary, alt, expected):
    queues = {"primary": queue_with("primary", primary), "alt": queue_with("alt", alt)}
    assert reroute_on_overload("primary", ["alt"], queues, limit=10) == expected


def test_orchestrator_reroutes_under_load(clock):
    heavy, spare = make_sim(clock, "heavy"), make_sim(clock, "spare")
    reg = registry_for(heavy, spare)
    orch = Orchestrator({"heavy": heavy, "spare": spare}, clock, alternates={"heavy": ["spare"]}, reroute_limit=2)
    wfs = [WorkflowSpec(f"w{i}").add_stage(StageSpec("s", "heavy", prompt=words(10))).validate(reg) for i in range(6)]

    async def main():
        return await asyncio.gather(*(orch.execute_workflow(wf, plan_explicit(wf, reg), wf.id) for wf in wfs))

    refs = [r.results["s"].backend_ref for r in clock.run(main())]
    assert "spare" in refs and "heavy" in refs


def test_module_level_execute_workflow(clock):
    b = make_sim(clock)
    reg = registry_for(b)
    wf = WorkflowSpec("x").add_stage(StageSpec("a", "heavy", prompt="hi")).validate(reg)
    report = clock.run(execute_workflow(wf, plan_explicit(wf, reg), {"heavy": b}, clock))
    assert report.status == {"a": "completed"}
