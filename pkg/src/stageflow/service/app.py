"""HTTP front for simulated backends, speaking the chat-completions wire format.

Besides ``/v1/chat/completions`` it exposes the cache controls the memory
manager needs (``/sim/flush``, ``/sim/preserve``, ``/sim/utilization``), so
an HTTP backend with ``cache_api="sim"`` can be driven end to end.
"""

from __future__ import annotations

import itertools
import json
from typing import Mapping, Optional

from fastapi import FastAPI, Header, HTTPException

from stageflow.backends.base import CompletionRequest
from stageflow.backends.simulated import SimulatedBackend
from stageflow.service.schemas import (
    ChatCompletionRequest,
    ChatCompletionResponse,
    Choice,
    FlushRequest,
    FlushResponse,
    FunctionCall,
    PreserveRequest,
    PreserveResponse,
    PromptTokensDetails,
    ResponseMessage,
    SimTiming,
    ToolCallItem,
    UsageBody,
    UtilizationResponse,
)
from stageflow.workflow import Message, ToolCall


def _arguments(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def to_messages(body: ChatCompletionRequest) -> list[Message]:
    out = []
    for m in body.messages:
        calls = tuple(
            ToolCall(tc.function.name, _arguments(tc.function.arguments), tc.id) for tc in m.tool_calls or ()
        )
        out.append(Message(m.role, m.content or "", m.tool_call_id, calls))
    return out


def create_app(backends: Mapping[str, SimulatedBackend]) -> FastAPI:
    """Serve each simulated backend under its model name."""
    by_model = {b.model: b for b in backends.values()}
    if len(by_model) != len(backends):
        raise ValueError("simulated backends behind one service must serve distinct models")
    ids = itertools.count()
    app = FastAPI(title="stageflow simulator")

    def lookup(model: str) -> SimulatedBackend:
        backend = by_model.get(model)
        if backend is None:
            raise HTTPException(status_code=404, detail=f"model {model!r} not served")
        return backend

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "models": sorted(by_model)}

    @app.post("/v1/chat/completions", response_model=ChatCompletionResponse)
    async def chat_completions(
        body: ChatCompletionRequest,
        x_workflow_id: Optional[str] = Header(None),
        x_stage_id: Optional[str] = Header(None),
        x_turn: Optional[int] = Header(None),
        x_expected_output_tokens: Optional[int] = Header(None),
    ):
        backend = lookup(body.model)
        metadata = {}
        for key, value in (
            ("workflow_id", x_workflow_id),
            ("stage_id", x_stage_id),
            ("turn", x_turn),
            ("expected_output_tokens", x_expected_output_tokens),
        ):
            if value is not None:
                metadata[key] = value
        req = CompletionRequest(
            model=body.model,
            messages=to_messages(body),
            temperature=body.temperature,
            max_tokens=body.max_tokens,
            tools=body.tools,
            response_format=body.response_format,
            metadata=metadata,
        )
        resp = await backend.complete(req)
        calls = [
            ToolCallItem(id=c.call_id, function=FunctionCall(name=c.tool_name, arguments=json.dumps(c.arguments)))
            for c in resp.tool_calls
        ]
        u = resp.usage
        return ChatCompletionResponse(
            id=f"chatcmpl-sim-{next(ids)}",
            model=body.model,
            choices=[
                Choice(
                    message=ResponseMessage(content=resp.content, tool_calls=calls or None),
                    finish_reason="tool_calls" if calls else "stop",
                )
            ],
            usage=UsageBody(
                prompt_tokens=u.prompt_tokens,
                completion_tokens=u.completion_tokens,
                total_tokens=u.prompt_tokens + u.completion_tokens,
                prompt_tokens_details=PromptTokensDetails(cached_tokens=u.cached_prefix_tokens),
            ),
            x_sim_timing=SimTiming(
                queue_ms=resp.timing.queue_ms, ttft_ms=resp.timing.ttft_ms, total_ms=resp.timing.total_ms
            ),
        )

    @app.post("/sim/flush", response_model=FlushResponse)
    async def flush(body: FlushRequest):
        freed = await lookup(body.model).flush(body.workflow_id)
        return FlushResponse(model=body.model, freed_tokens=freed)

    @app.post("/sim/preserve", response_model=PreserveResponse)
    async def preserve(body: PreserveRequest):
        ok = await lookup(body.model).preserve(body.workflow_id)
        return PreserveResponse(model=body.model, preserved=ok)

    @app.get("/sim/utilization", response_model=UtilizationResponse)
    async def utilization(model: str):
        return UtilizationResponse(model=model, utilization=await lookup(model).utilization())

    return app
