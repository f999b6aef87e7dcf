from __future__ import annotations

from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class FunctionCall(BaseModel):
    name: str
    arguments: str = "{}"


class ToolCallItem(BaseModel):
    id: str
    type: Literal["function"] = "function"
    function: FunctionCall


class ChatMessage(BaseModel):
    model_config = ConfigDict(extra="ignore")

    role: Literal["system", "user", "assistant", "tool"]
    content: Optional[str] = None
    tool_call_id: Optional[str] = None
    tool_calls: Optional[list[ToolCallItem]] = None


class ChatCompletionRequest(BaseModel):
    model_config = ConfigDict(extra="ignore")

    model: str
    messages: list[ChatMessage] = Field(min_length=1)
    temperature: float = Field(0.0, ge=0)
    max_tokens: int = Field(256, gt=0)
    tools: Optional[list[dict[str, Any]]] = None
    response_format: Optional[dict[str, Any]] = None


class ResponseMessage(BaseModel):
    role: Literal["assistant"] = "assistant"
    content: Optional[str]
    tool_calls: Optional[list[ToolCallItem]] = None


class Choice(BaseModel):
    index: int = 0
    message: ResponseMessage
    finish_reason: Literal["stop", "tool_calls", "length"]


class PromptTokensDetails(BaseModel):
    cached_tokens: int = 0


class UsageBody(BaseModel):
    prompt_tokens: int
    completion_tokens: int
    total_tokens: int
    prompt_tokens_details: PromptTokensDetails


class SimTiming(BaseModel):
    queue_ms: float
    ttft_ms: float
    total_ms: float


class ChatCompletionResponse(BaseModel):
    id: str
    object: Literal["chat.completion"] = "chat.completion"
    created: int = 0
    model: str
    choices: list[Choice]
    usage: UsageBody
    x_sim_timing: SimTiming


class FlushRequest(BaseModel):
    model: str
    workflow_id: Optional[str] = None


class FlushResponse(BaseModel):
    model: str
    freed_tokens: int


class PreserveRequest(BaseModel):
    model: str
    workflow_id: str


class PreserveResponse(BaseModel):
    model: str
    preserved: bool


class UtilizationResponse(BaseModel):
    model: str
    utilization: float
