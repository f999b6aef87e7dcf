import asyncio
import json

import httpx
import pytest
from conftest import WIRE, sim_config, words

from stageflow.backends.base import CompletionRequest, Non2xxStatus
from stageflow.backends.http import HttpBackend
from stageflow.backends.simulated import ScriptedReply, SimulatedBackend
from stageflow.clock import WallClock
from stageflow.service import create_app
from stageflow.workflow import Message


def setup(**kw):
    clock = WallClock(0)
    sim = SimulatedBackend("heavy", "large-model", sim_config(prefill=2, decode=20, out=30, **kw), clock)
    app = create_app({"heavy": sim})
    client = httpx.AsyncClient(transport=httpx.ASGITransport(app=app), base_url="http://sim")
    http = HttpBackend("heavy", "large-model", "http://sim", clock, cache_api="sim", client=client)
    return sim, http, client


def req(text, wid="w1", **md):
    return CompletionRequest("large-model", [Message("user", text)], max_tokens=100,
                             metadata={"workflow_id": wid, "stage_id": "s", "turn": 0, **md})


def test_completion_through_service_reports_simulated_timing():
    sim, http, _ = setup()

    async def main():
        cold = await http.complete(req(words(120)))
        await http.preserve("w1")
        warm = await http.complete(req(words(120) + " " + words(10, "d")))
        return cold, warm

    cold, warm = asyncio.run(main())
    # wall clock at scale 0: modelled latency plus a few real microseconds of queueing
    assert (cold.timing.ttft_ms, cold.timing.total_ms) == pytest.approx((240, 840), abs=5)
    assert not cold.timing.ttft_estimated
    assert cold.usage.prompt_tokens == 120 and cold.usage.completion_tokens == 30
    assert warm.usage.cached_prefix_tokens == 120 and warm.timing.ttft_ms == pytest.approx(20, abs=5)
    assert sim.cache.is_preserved("w1")


def test_cache_controls_over_http():
    sim, http, _ = setup(capacity=1000)

    async def main():
        await http.complete(req(words(400)))
        before = await http.utilization()
        freed = await http.flush("w1")
        return before, freed, await http.utilization()

    assert asyncio.run(main()) == (0.4, 400, 0.0)


def test_scripted_tool_call_round_trips():
    sim, http, _ = setup()
    sim.add_script({("s", 0): ScriptedReply(tool_calls=(("send_email", {"to": "a@b.c"}),))})
    resp = asyncio.run(http.complete(req("email them")))
    assert resp.tool_calls[0].tool_name == "send_email"
    assert resp.tool_calls[0].arguments == {"to": "a@b.c"}


def test_expected_output_header_drives_from_trace_rule():
    clock = WallClock(0)
    sim = SimulatedBackend("h", "m", sim_config(rule="from_trace", out=5), clock)
    client = httpx.AsyncClient(transport=httpx.ASGITransport(app=create_app({"h": sim})), base_url="http://sim")
    http = HttpBackend("h", "m", "http://sim", clock, client=client)
    r = CompletionRequest("m", [Message("user", "x")], max_tokens=100, metadata={"expected_output_tokens": 17})
    assert asyncio.run(http.complete(r)).usage.completion_tokens == 17


def test_recorded_requests_are_accepted():
    # the service parses the recorded wire bodies (model name aside)
    sim, _, client = setup()

    async def main():
        out = []
        for name in ("plain", "tool_call", "usage"):
            body = json.loads((WIRE / f"{name}.request.json").read_bytes())
            body["model"] = "large-model"
            out.append(await client.post("/v1/chat/completions", json=body))
        return out

    for resp in asyncio.run(main()):
        assert resp.status_code == 200
        data = resp.json()
        assert data["object"] == "chat.completion"
        assert data["choices"][0]["message"]["role"] == "assistant"


def test_unknown_model_is_404():
    _, _, client = setup()
    http = HttpBackend("x", "other-model", "http://sim", WallClock(0), client=client)
    with pytest.raises(Non2xxStatus) as info:
        asyncio.run(http.complete(CompletionRequest("other-model", [Message("user", "hi")])))
    assert info.value.code == 404


def test_invalid_body_is_422():
    _, _, client = setup()
    resp = asyncio.run(client.post("/v1/chat/completions", json={"model": "large-model", "messages": "nope"}))
    assert resp.status_code == 422


def test_healthz_lists_models():
    _, _, client = setup()
    resp = asyncio.run(client.get("/healthz"))
    assert resp.json() == {"status": "ok", "models": ["large-model"]}


def test_duplicate_models_rejected():
    clock = WallClock(0)
    a = SimulatedBackend("a", "same", sim_config(), clock)
    b = SimulatedBackend("b", "same", sim_config(), clock)
    with pytest.raises(ValueError):
        create_app({"a": a, "b": b})
