from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Any

from stageflow.workflow import CachePolicy


class SignalKind(str, enum.Enum):
    STAGE_START = "stage_start"
    STAGE_COMPLETE = "stage_complete"
    WORKFLOW_COMPLETE = "workflow_complete"


@dataclass(frozen=True)
class LifecycleSignal:
    """Stage transition or workflow completion, as seen by the memory manager.

    ``cache_override`` and ``tau_override`` carry the stage's cache hints and
    are only meaningful on ``STAGE_START``.
    """

    kind: SignalKind
    workflow_id: str
    ts: float
    stage_id: str | None = None
    backend_ref: str | None = None
    model: str | None = None
    context_tokens: int = 0
    cache_override: CachePolicy = CachePolicy.NONE
    tau_override: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SignalKind(self.kind))
        object.__setattr__(self, "cache_override", CachePolicy(self.cache_override))
        if self.context_tokens < 0:
            raise ValueError("context_tokens must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "workflow_id": self.workflow_id,
            "stage_id": self.stage_id,
            "backend_ref": self.backend_ref,
            "model": self.model,
            "context_tokens": self.context_tokens,
            "ts": self.ts,
            "cache_override": self.cache_override.value,
            "tau_override": self.tau_override,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LifecycleSignal:
        return cls(
            kind=d["kind"],
            workflow_id=d["workflow_id"],
            ts=d.get("ts", 0.0),
            stage_id=d.get("stage_id"),
            backend_ref=d.get("backend_ref"),
            model=d.get("model"),
            context_tokens=d.get("context_tokens", 0),
            cache_override=d.get("cache_override", "none"),
            tau_override=d.get("tau_override"),
        )
