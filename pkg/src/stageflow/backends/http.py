"""Client for OpenAI-compatible ``/v1/chat/completions`` endpoints."""

from __future__ import annotations

import json
import logging
from typing import Any

import httpx

from stageflow.backends.base import (
    Backend,
    CompletionRequest,
    CompletionResponse,
    MalformedResponse,
    Non2xxStatus,
    Timing,
    TransportError,
)
from stageflow.clock import Clock, WallClock
from stageflow.workflow import Message, ToolCall, Usage

logger = logging.getLogger(__name__)

COMPLETIONS_PATH = "/v1/chat/completions"


def _message_body(m: Message) -> dict[str, Any]:
    body: dict[str, Any] = {"role": m.role, "content": m.content}
    if m.tool_call_id is not None:
        body["tool_call_id"] = m.tool_call_id
    if m.tool_calls:
        body["tool_calls"] = [
            {
                "id": c.call_id,
                "type": "function",
                "function": {
                    "name": c.tool_name,
                    "arguments": c.arguments if isinstance(c.arguments, str) else json.dumps(c.arguments),
                },
            }
            for c in m.tool_calls
        ]
    return body


def request_body(req: CompletionRequest) -> dict[str, Any]:
    body: dict[str, Any] = {
        "model": req.model,
        "messages": [_message_body(m) for m in req.messages],
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    }
    if req.tools:
        body["tools"] = list(req.tools)
    if req.response_format is not None:
        body["response_format"] = req.response_format
    return body


def serialize_request(req: CompletionRequest) -> bytes:
    return json.dumps(request_body(req), separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _parse_arguments(raw: Any) -> Any:
    if isinstance(raw, str):
        try:
            return json.loads(raw)
        except json.JSONDecodeError:
            return raw
    return raw


def parse_response(data: Any) -> tuple[str, list[ToolCall], Usage, dict[str, float] | None]:
    """Extract content, tool calls, usage and optional server timing from a response body."""
    if isinstance(data, (bytes, str)):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise MalformedResponse(f"response is not JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise MalformedResponse("response body is not an object")
    choices = data.get("choices")
    if not isinstance(choices, list) or not choices:
        raise MalformedResponse("response has no choices")
    message = choices[0].get("message") if isinstance(choices[0], dict) else None
    if not isinstance(message, dict):
        raise MalformedResponse("choices[0] has no message")

    calls = []
    for i, tc in enumerate(message.get("tool_calls") or []):
        fn = tc.get("function") or {}
        if "name" not in fn:
            raise MalformedResponse(f"tool call {i} has no function name")
        calls.append(ToolCall(fn["name"], _parse_arguments(fn.get("arguments")), tc.get("id") or f"call-{i}"))

    usage_raw = data.get("usage") or {}
    details = usage_raw.get("prompt_tokens_details") or {}
    usage = Usage(
        int(usage_raw.get("prompt_tokens") or 0),
        int(usage_raw.get("completion_tokens") or 0),
        int(details.get("cached_tokens") or 0),
    )
    timing = data.get("x_sim_timing")
    return message.get("content") or "", calls, usage, timing if isinstance(timing, dict) else None


class HttpBackend(Backend):
    """Backend reached over HTTP.

    ``cache_api`` selects how flush/preserve/utilization are carried out:
    ``"sim"`` uses the ``/sim/*`` endpoints of the bundled simulator service,
    ``"none"`` logs a warning and does nothing.
    """

    def __init__(
        self,
        ref: str,
        model: str,
        endpoint_url: str,
        clock: Clock | None = None,
        *,
        max_concurrency: int = 16,
        cache_api: str = "none",
        timeout_s: float = 600.0,
        client: httpx.AsyncClient | None = None,
    ):
        if cache_api not in ("none", "sim"):
            raise ValueError(f"unknown cache_api {cache_api!r}")
        self.ref = ref
        self.model = model
        self.endpoint_url = endpoint_url.rstrip("/")
        self.clock = clock or WallClock()
        self.max_concurrency = max_concurrency
        self.cache_api = cache_api
        self.calls = 0
        self._client = client
        self._timeout = timeout_s
        self._warned = False

    def _http(self) -> httpx.AsyncClient:
        if self._client is None:
            self._client = httpx.AsyncClient(timeout=self._timeout)
        return self._client

    async def aclose(self) -> None:
        if self._client is not None:
            await self._client.aclose()

    async def _post(self, path: str, **kwargs: Any) -> httpx.Response:
        try:
            resp = await self._http().post(self.endpoint_url + path, **kwargs)
        except httpx.HTTPError as exc:
            raise TransportError(f"{self.ref}: {exc}") from exc
        if not 200 <= resp.status_code < 300:
            raise Non2xxStatus(resp.status_code, resp.text)
        return resp

    async def complete(self, req: CompletionRequest) -> CompletionResponse:
        self.calls += 1
        headers = {"content-type": "application/json"}
        for key, header in (
            ("workflow_id", "x-workflow-id"),
            ("stage_id", "x-stage-id"),
            ("turn", "x-turn"),
            ("expected_output_tokens", "x-expected-output-tokens"),
        ):
            if key in req.metadata:
                headers[header] = str(req.metadata[key])
        started = self.clock.now()
        resp = await self._post(COMPLETIONS_PATH, content=serialize_request(req), headers=headers)
        elapsed = self.clock.now() - started
        content, calls, usage, server_timing = parse_response(resp.content)
        if server_timing is not None:
            timing = Timing(
                float(server_timing.get("queue_ms", 0.0)),
                float(server_timing["ttft_ms"]),
                float(server_timing["total_ms"]),
            )
        else:
            timing = Timing(0.0, elapsed, elapsed, ttft_estimated=True)
        return CompletionResponse(content, calls, usage, timing)

    def _no_cache_api(self, op: str) -> None:
        if not self._warned:
            logger.warning("backend %s has no cache API; %s is a no-op", self.ref, op)
            self._warned = True

    async def flush(self, workflow_id: str | None = None) -> int:
        if self.cache_api == "none":
            self._no_cache_api("flush")
            return 0
        resp = await self._post("/sim/flush", json={"model": self.model, "workflow_id": workflow_id})
        return int(resp.json().get("freed_tokens", 0))

    async def preserve(self, workflow_id: str) -> bool:
        if self.cache_api == "none":
            self._no_cache_api("preserve")
            return False
        resp = await self._post("/sim/preserve", json={"model": self.model, "workflow_id": workflow_id})
        return bool(resp.json().get("preserved", False))

    async def utilization(self) -> float | None:
        if self.cache_api == "none":
            return None
        try:
            resp = await self._http().get(self.endpoint_url + "/sim/utilization", params={"model": self.model})
        except httpx.HTTPError as exc:
            raise TransportError(f"{self.ref}: {exc}") from exc
        if resp.status_code != 200:
            raise Non2xxStatus(resp.status_code, resp.text)
        return float(resp.json()["utilization"])
