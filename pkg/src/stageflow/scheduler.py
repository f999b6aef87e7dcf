"""Two-level scheduling: per-backend queues split into per-stage sub-queues.

A stage policy picks which sub-queue to serve by looking only at sub-queue
heads; a request policy then picks the request inside that sub-queue.
"""

from __future__ import annotations

import itertools
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

logger = logging.getLogger(__name__)


@dataclass
class QueuedRequest:
    request_id: str
    workflow_id: str
    stage_id: str
    arrival_ts: float
    priority: int = 0
    prompt_tokens_estimate: int = 0
    context: Any = None
    # opaque slot for the caller (the orchestrator parks its completion future here)
    payload: Any = field(default=None, compare=False, repr=False)
    seq: int = field(default=-1, compare=False)


StagePolicy = Callable[[Sequence[QueuedRequest]], str]
RequestPolicy = Callable[[Sequence[QueuedRequest]], int]


class PolicyError(Exception):
    pass


class UnknownPolicy(PolicyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unknown scheduling policy {name!r}")


class DuplicateName(PolicyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"policy {name!r} already registered")


class ReservedName(PolicyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"policy name {name!r} is reserved")


# heads arrive sorted by stage_id, so min()/max() ties fall back to stage order


def fcfs_stage(heads: Sequence[QueuedRequest]) -> str:
    return min(heads, key=lambda r: (r.arrival_ts, r.stage_id)).stage_id


def priority_stage(heads: Sequence[QueuedRequest]) -> str:
    return min(heads, key=lambda r: (-r.priority, r.arrival_ts, r.stage_id)).stage_id


def sjf_stage(heads: Sequence[QueuedRequest]) -> str:
    """Shortest head prompt first. Shipped as an example; not registered by default."""
    return min(heads, key=lambda r: (r.prompt_tokens_estimate, r.arrival_ts, r.stage_id)).stage_id


def fcfs_request(queue: Sequence[QueuedRequest]) -> int:
    return 0


def priority_request(queue: Sequence[QueuedRequest]) -> int:
    best = min(range(len(queue)), key=lambda i: (-queue[i].priority, queue[i].arrival_ts, queue[i].seq))
    return best


RESERVED = ("fcfs", "priority")
_ALIASES = {"fifo": "fcfs"}


class PolicyRegistry:
    def __init__(self):
        self._stage: dict[str, StagePolicy] = {"fcfs": fcfs_stage, "priority": priority_stage}
        self._request: dict[str, RequestPolicy] = {"fcfs": fcfs_request, "priority": priority_request}
        self._lock = threading.Lock()

    def register(self, level: str, name: str, fn: Callable) -> None:
        if not name:
            raise ValueError("policy name must be non-empty")
        if name in RESERVED or name in _ALIASES:
            raise ReservedName(name)
        table = self._table(level)
        with self._lock:
            if name in table:
                raise DuplicateName(name)
            table[name] = fn

    def stage_policy(self, name: str) -> StagePolicy:
        try:
            return self._stage[_ALIASES.get(name, name)]
        except KeyError:
            raise UnknownPolicy(name) from None

    def request_policy(self, name: str) -> RequestPolicy:
        try:
            return self._request[_ALIASES.get(name, name)]
        except KeyError:
            raise UnknownPolicy(name) from None

    def has(self, level: str, name: str) -> bool:
        return _ALIASES.get(name, name) in self._table(level)

    def _table(self, level: str) -> dict[str, Callable]:
        level = level.lower()
        if level == "stage":
            return self._stage
        if level == "request":
            return self._request
        raise ValueError(f"unknown policy level {level!r}")


def register_policy(reg: PolicyRegistry, level: str, name: str, fn: Callable) -> None:
    reg.register(level, name, fn)


class BackendQueue:
    """Thread-safe queue of ready requests for one backend."""

    def __init__(
        self,
        backend_ref: str,
        stage_policy: str = "fcfs",
        request_policy: str = "fcfs",
        registry: PolicyRegistry | None = None,
    ):
        self.backend_ref = backend_ref
        self.registry = registry or PolicyRegistry()
        self.registry.stage_policy(stage_policy)
        self.registry.request_policy(request_policy)
        self.stage_policy = stage_policy
        self.request_policy = request_policy
        self.sub_queues: dict[str, deque[QueuedRequest]] = {}
        self._request_policies: dict[str, str] = {}
        # stage whose requested policy is in force; None while the constructor default applies
        self._policy_owner: str | None = None
        self._seq = itertools.count()
        self._lock = threading.RLock()

    def __len__(self) -> int:
        with self._lock:
            return sum(len(q) for q in self.sub_queues.values())

    @property
    def depth(self) -> int:
        return len(self)

    def enqueue(
        self,
        r: QueuedRequest,
        stage_policy: str | None = None,
        request_policy: str | None = None,
    ) -> None:
        with self._lock:
            if stage_policy is not None and stage_policy != self.stage_policy:
                self.registry.stage_policy(stage_policy)
                if self._policy_owner is not None and self._policy_owner != r.stage_id:
                    logger.warning(
                        "backend %s: stage %s switches stage policy %s (set by %s) -> %s",
                        self.backend_ref, r.stage_id, self.stage_policy, self._policy_owner, stage_policy,
                    )
                self.stage_policy = stage_policy
                self._policy_owner = r.stage_id
            elif stage_policy is not None and self._policy_owner is None:
                self._policy_owner = r.stage_id
            if request_policy is not None:
                self.registry.request_policy(request_policy)
                self._request_policies[r.stage_id] = request_policy
            r.seq = next(self._seq)
            self.sub_queues.setdefault(r.stage_id, deque()).append(r)

    def _pick(self, stage: str) -> int:
        fn = self.registry.request_policy(self._request_policies.get(stage, self.request_policy))
        if fn is fcfs_request:
            return 0
        return fn(list(self.sub_queues[stage]))

    def heads(self) -> list[QueuedRequest]:
        """The request each sub-queue would release next, in stage-id order.

        Under the default fcfs request policy this is the oldest request.
        """
        with self._lock:
            return [self.sub_queues[s][self._pick(s)] for s in sorted(self.sub_queues)]

    def select_stage(self, policy: str | None = None) -> str | None:
        fn = self.registry.stage_policy(policy or self.stage_policy)
        with self._lock:
            heads = self.heads()
            if not heads:
                return None
            return fn(heads)

    def dequeue_next(self) -> QueuedRequest | None:
        with self._lock:
            stage = self.select_stage()
            if stage is None:
                return None
            sub = self.sub_queues[stage]
            idx = self._pick(stage)
            r = sub[idx]
            del sub[idx]
            if not sub:
                del self.sub_queues[stage]
            return r

    def snapshot(self) -> dict[str, list[str]]:
        with self._lock:
            return {s: [r.request_id for r in q] for s, q in sorted(self.sub_queues.items())}


def enqueue(q: BackendQueue, r: QueuedRequest) -> None:
    q.enqueue(r)


def select_stage(q: BackendQueue, policy: str) -> str | None:
    return q.select_stage(policy)


def dequeue_next(q: BackendQueue) -> QueuedRequest | None:
    return q.dequeue_next()
