from stageflow.backends.base import (
    Backend,
    BackendError,
    CapacityExceeded,
    CompletionRequest,
    CompletionResponse,
    EmptyPrompt,
    MalformedResponse,
    Non2xxStatus,
    Timing,
    TransportError,
    tool_schema,
)
from stageflow.backends.http import HttpBackend, parse_response, serialize_request
from stageflow.backends.simulated import (
    OutputRule,
    OutputTokens,
    ScriptedReply,
    SimulatedBackend,
    SimulatedBackendConfig,
    SimulatedCache,
    message_tokens,
    prefix_match,
    tokenize_sim,
)

__all__ = [
    "Backend",
    "BackendError",
    "CapacityExceeded",
    "CompletionRequest",
    "CompletionResponse",
    "EmptyPrompt",
    "HttpBackend",
    "MalformedResponse",
    "Non2xxStatus",
    "OutputRule",
    "OutputTokens",
    "ScriptedReply",
    "SimulatedBackend",
    "SimulatedBackendConfig",
    "SimulatedCache",
    "Timing",
    "TransportError",
    "message_tokens",
    "parse_response",
    "prefix_match",
    "serialize_request",
    "tokenize_sim",
    "tool_schema",
]
