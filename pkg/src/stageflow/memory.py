"""Workflow-level KV-cache lifecycle management.

Each lifecycle signal resolves to cache actions in a fixed order: the stage's
explicit override, then the first policy in the chain that does something,
then nothing at all (the backend's own eviction governs). A pressure monitor
runs separately and flushes the oldest idle preserved entry on any backend
whose utilization exceeds the pressure threshold.
"""

from __future__ import annotations

import asyncio
import enum
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from stageflow.backends.base import Backend, BackendError
from stageflow.clock import Clock
from stageflow.signals import LifecycleSignal, SignalKind
from stageflow.workflow import CachePolicy

logger = logging.getLogger(__name__)


class ActionKind(str, enum.Enum):
    PRESERVE = "preserve"
    FLUSH = "flush"
    NOOP = "noop"


@dataclass(frozen=True)
class CacheAction:
    kind: ActionKind
    target: tuple[str, str] | None = None
    reason: str = ""

    def __post_init__(self):
        if (self.kind is ActionKind.NOOP) != (self.target is None):
            raise ValueError("NoOp carries no target; Preserve/Flush require one")

    def to_dict(self) -> dict:
        return {
            "action": self.kind.value,
            "target": list(self.target) if self.target else None,
            "reason": self.reason,
        }


NOOP = CacheAction(ActionKind.NOOP)


def flush(workflow_id: str, backend_ref: str, reason: str) -> CacheAction:
    return CacheAction(ActionKind.FLUSH, (workflow_id, backend_ref), reason)


def preserve(workflow_id: str, backend_ref: str, reason: str) -> CacheAction:
    return CacheAction(ActionKind.PRESERVE, (workflow_id, backend_ref), reason)


@dataclass
class CacheEntry:
    workflow_id: str
    backend_ref: str
    model: str
    token_count: int
    preserved: bool = False
    last_update_ts: float = 0.0


@dataclass(frozen=True)
class LastStage:
    stage_id: str
    backend_ref: str
    model: str
    token_count: int


@dataclass
class WorkflowTracker:
    entries: dict[tuple[str, str], CacheEntry] = field(default_factory=dict)
    in_flight: dict[str, dict[str, int]] = field(default_factory=dict)
    completed_workflows: set[str] = field(default_factory=set)
    last_stage: dict[str, LastStage] = field(default_factory=dict)
    # stage bookkeeping used only to reject out-of-order signals
    active: dict[str, dict[str, str]] = field(default_factory=dict)
    finished: dict[str, set[str]] = field(default_factory=dict)

    def in_flight_count(self, backend_ref: str, workflow_id: str) -> int:
        return self.in_flight.get(backend_ref, {}).get(workflow_id, 0)

    def workflow_entries(self, workflow_id: str) -> list[CacheEntry]:
        # every entry's backend has seen a StageStart, so in_flight knows it
        found = (self.entries.get((workflow_id, b)) for b in sorted(self.in_flight))
        return [e for e in found if e is not None]

    def preserved_entries(self, workflow_id: str) -> list[CacheEntry]:
        return [e for e in self.workflow_entries(workflow_id) if e.preserved]


@dataclass(frozen=True)
class MemoryConfig:
    tau: int = 512
    tau_pressure: float = 0.85
    monitor_interval_ms: float = 100.0
    policy_chain: tuple[str, ...] = ("preserve_small_increment", "flush_at_boundary")

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.tau_pressure <= 1:
            raise ValueError("tau_pressure must be in (0, 1]")
        if self.monitor_interval_ms < 0:
            raise ValueError("monitor_interval_ms must be >= 0")
        object.__setattr__(self, "policy_chain", tuple(self.policy_chain))
        for name in self.policy_chain:
            if name not in POLICIES:
                raise ValueError(f"unknown memory policy {name!r}")


class OutOfOrderSignal(Exception):
    pass


# --- policies ---------------------------------------------------------------------


def policy_preserve_small_increment(sig: LifecycleSignal, tracker: WorkflowTracker, tau: int) -> CacheAction:
    if sig.kind is not SignalKind.STAGE_START:
        return NOOP
    last = tracker.last_stage.get(sig.workflow_id)
    if last is None:
        return NOOP
    if last.backend_ref != sig.backend_ref or last.model != sig.model:
        return NOOP
    if sig.context_tokens - last.token_count >= tau:
        return NOOP
    return preserve(sig.workflow_id, sig.backend_ref, "preserve_small_increment")


def policy_flush_at_boundary(sig: LifecycleSignal, tracker: WorkflowTracker) -> list[CacheAction]:
    if sig.kind is SignalKind.WORKFLOW_COMPLETE:
        return [
            flush(e.workflow_id, e.backend_ref, "flush_at_boundary")
            for e in tracker.preserved_entries(sig.workflow_id)
        ]
    if sig.kind is SignalKind.STAGE_START:
        last = tracker.last_stage.get(sig.workflow_id)
        if last is not None and (last.backend_ref != sig.backend_ref or last.model != sig.model):
            return [flush(sig.workflow_id, last.backend_ref, "flush_at_boundary")]
    return []


Policy = Callable[[LifecycleSignal, WorkflowTracker, MemoryConfig], list[CacheAction]]


def _preserve_policy(sig: LifecycleSignal, tracker: WorkflowTracker, config: MemoryConfig) -> list[CacheAction]:
    tau = sig.tau_override if sig.tau_override is not None else config.tau
    return [policy_preserve_small_increment(sig, tracker, tau)]


def _boundary_policy(sig: LifecycleSignal, tracker: WorkflowTracker, config: MemoryConfig) -> list[CacheAction]:
    return policy_flush_at_boundary(sig, tracker)


POLICIES: dict[str, Policy] = {
    "preserve_small_increment": _preserve_policy,
    "flush_at_boundary": _boundary_policy,
}


def _effective(actions: Iterable[CacheAction]) -> list[CacheAction]:
    return [a for a in actions if a.kind is not ActionKind.NOOP]


# --- signal handling ----------------------------------------------------------------


def _override_action(sig: LifecycleSignal, tracker: WorkflowTracker) -> CacheAction | None:
    if sig.kind is not SignalKind.STAGE_START or sig.cache_override is CachePolicy.NONE:
        return None
    if sig.cache_override is CachePolicy.PRESERVE:
        return preserve(sig.workflow_id, sig.backend_ref, "override")
    last = tracker.last_stage.get(sig.workflow_id)
    target = last.backend_ref if last is not None else sig.backend_ref
    return flush(sig.workflow_id, target, "override")


def _check_order(sig: LifecycleSignal, tracker: WorkflowTracker) -> None:
    wid = sig.workflow_id
    if wid in tracker.completed_workflows:
        raise OutOfOrderSignal(f"{sig.kind.value} for completed workflow {wid!r}")
    active = tracker.active.get(wid, {})
    finished = tracker.finished.get(wid, set())
    if sig.kind is SignalKind.STAGE_START:
        if sig.stage_id is None or sig.backend_ref is None:
            raise OutOfOrderSignal("stage_start needs stage_id and backend_ref")
        if sig.stage_id in active or sig.stage_id in finished:
            raise OutOfOrderSignal(f"stage {sig.stage_id!r} of {wid!r} started twice")
    elif sig.kind is SignalKind.STAGE_COMPLETE:
        if sig.stage_id not in active:
            raise OutOfOrderSignal(f"stage {sig.stage_id!r} of {wid!r} completed before it started")
    elif active:
        raise OutOfOrderSignal(f"workflow {wid!r} completed with active stages {sorted(active)}")


def _apply_to_tracker(action: CacheAction, tracker: WorkflowTracker, sig: LifecycleSignal) -> None:
    if action.kind is ActionKind.FLUSH:
        tracker.entries.pop(action.target, None)
    elif action.kind is ActionKind.PRESERVE:
        entry = tracker.entries.get(action.target)
        if entry is None and sig.context_tokens > 0:
            entry = CacheEntry(action.target[0], action.target[1], sig.model or "", sig.context_tokens)
            tracker.entries[action.target] = entry
        if entry is not None and entry.token_count > 0:
            entry.preserved = True
            entry.last_update_ts = sig.ts


def on_signal(
    sig: LifecycleSignal,
    tracker: WorkflowTracker,
    config: MemoryConfig,
    chain: Iterable[str] | None = None,
) -> list[CacheAction]:
    """Resolve the cache actions for one signal and update ``tracker``.

    Returns ``[NOOP]`` when nothing is to be done.
    """
    _check_order(sig, tracker)

    override = _override_action(sig, tracker)
    if override is not None:
        actions = [override]
    else:
        actions = []
        for name in chain if chain is not None else config.policy_chain:
            actions = _effective(POLICIES[name](sig, tracker, config))
            if actions:
                break

    if sig.kind is SignalKind.WORKFLOW_COMPLETE:
        # whatever the chain, nothing stays pinned for a finished workflow
        targeted = {a.target for a in actions if a.kind is ActionKind.FLUSH}
        actions += [
            flush(e.workflow_id, e.backend_ref, "workflow_complete")
            for e in tracker.preserved_entries(sig.workflow_id)
            if (e.workflow_id, e.backend_ref) not in targeted
        ]

    for a in actions:
        _apply_to_tracker(a, tracker, sig)
    _record(sig, tracker)
    return actions or [NOOP]


def _record(sig: LifecycleSignal, tracker: WorkflowTracker) -> None:
    wid = sig.workflow_id
    if sig.kind is SignalKind.STAGE_START:
        b = sig.backend_ref
        tracker.active.setdefault(wid, {})[sig.stage_id] = b
        per_backend = tracker.in_flight.setdefault(b, {})
        per_backend[wid] = per_backend.get(wid, 0) + 1
        entry = tracker.entries.get((wid, b))
        if entry is None:
            entry = CacheEntry(wid, b, sig.model or "", sig.context_tokens)
            tracker.entries[(wid, b)] = entry
        entry.model = sig.model or entry.model
        entry.token_count = sig.context_tokens
        entry.last_update_ts = sig.ts
        if entry.token_count == 0:
            entry.preserved = False
        tracker.last_stage[wid] = LastStage(sig.stage_id, b, sig.model or "", sig.context_tokens)

    elif sig.kind is SignalKind.STAGE_COMPLETE:
        b = tracker.active[wid].pop(sig.stage_id)
        tracker.finished.setdefault(wid, set()).add(sig.stage_id)
        per_backend = tracker.in_flight[b]
        per_backend[wid] -= 1
        if per_backend[wid] == 0:
            del per_backend[wid]
        entry = tracker.entries.get((wid, b))
        if entry is None:
            entry = CacheEntry(wid, b, sig.model or "", sig.context_tokens)
            tracker.entries[(wid, b)] = entry
        if sig.context_tokens:
            entry.token_count = sig.context_tokens
        entry.last_update_ts = sig.ts
        last = tracker.last_stage.get(wid)
        if last is not None and last.stage_id == sig.stage_id and sig.context_tokens:
            tracker.last_stage[wid] = LastStage(last.stage_id, last.backend_ref, last.model, sig.context_tokens)

    else:
        for e in tracker.workflow_entries(wid):
            del tracker.entries[(wid, e.backend_ref)]
        tracker.completed_workflows.add(wid)
        tracker.last_stage.pop(wid, None)
        tracker.active.pop(wid, None)
        tracker.finished.pop(wid, None)


def pressure_tick(
    tracker: WorkflowTracker,
    utilization: Mapping[str, float | None],
    tau_pressure: float,
) -> list[CacheAction]:
    """Flush the least recently updated idle preserved entry on each over-threshold backend."""
    actions = []
    for b in sorted(utilization):
        u = utilization[b]
        if u is None or u <= tau_pressure:
            continue
        idle = [
            e
            for (w, bb), e in tracker.entries.items()
            if bb == b and e.preserved and tracker.in_flight_count(b, w) == 0
        ]
        if not idle:
            continue
        victim = min(idle, key=lambda e: (e.last_update_ts, e.workflow_id))
        del tracker.entries[(victim.workflow_id, b)]
        actions.append(flush(victim.workflow_id, b, "pressure"))
    return actions


def replay(signals: Iterable[LifecycleSignal], config: MemoryConfig | None = None) -> list[tuple[LifecycleSignal, list[CacheAction]]]:
    """Feed a recorded signal sequence through a fresh tracker."""
    config = config or MemoryConfig()
    tracker = WorkflowTracker()
    return [(s, on_signal(s, tracker, config)) for s in signals]


class MemoryManager:
    """Consumes lifecycle signals and drives preserve/flush on backends."""

    def __init__(
        self,
        backends: Mapping[str, Backend],
        config: MemoryConfig | None = None,
        clock: Clock | None = None,
    ):
        self.backends = backends
        self.config = config or MemoryConfig()
        self.clock = clock
        self.tracker = WorkflowTracker()
        self.log: list[dict] = []
        self._chains: dict[str, tuple[str, ...]] = {}
        self._lock = threading.Lock()
        self._monitor: asyncio.Task | None = None

    def set_workflow_policy(self, workflow_id: str, chain: Iterable[str]) -> None:
        chain = tuple(chain)
        for name in chain:
            if name not in POLICIES:
                raise ValueError(f"unknown memory policy {name!r}")
        self._chains[workflow_id] = chain

    def on_signal(self, sig: LifecycleSignal) -> list[CacheAction]:
        with self._lock:
            actions = on_signal(sig, self.tracker, self.config, self._chains.get(sig.workflow_id))
            if sig.kind is SignalKind.WORKFLOW_COMPLETE:
                self._chains.pop(sig.workflow_id, None)
            for a in actions:
                self.log.append({"ts": sig.ts, "signal": sig.kind.value, "workflow_id": sig.workflow_id,
                                 "stage_id": sig.stage_id, **a.to_dict()})
            return actions

    async def handle(self, sig: LifecycleSignal) -> list[CacheAction]:
        actions = self.on_signal(sig)
        for a in actions:
            await self.apply_action(a)
        return actions

    __call__ = handle

    async def apply_action(self, action: CacheAction) -> None:
        if action.kind is ActionKind.NOOP:
            return
        workflow_id, ref = action.target
        backend = self.backends.get(ref)
        if backend is None:
            raise KeyError(f"cache action targets unregistered backend {ref!r}")
        op = backend.flush if action.kind is ActionKind.FLUSH else backend.preserve
        for attempt in (1, 2):
            try:
                await op(workflow_id)
                return
            except BackendError as exc:
                logger.warning("%s on %s failed (attempt %d): %s", action.kind.value, ref, attempt, exc)
        if action.kind is ActionKind.PRESERVE:
            with self._lock:
                entry = self.tracker.entries.get(action.target)
                if entry is not None:
                    entry.preserved = False

    async def tick(self) -> list[CacheAction]:
        utilization = {}
        for ref in sorted(self.backends):
            try:
                utilization[ref] = await self.backends[ref].utilization()
            except BackendError as exc:
                logger.warning("utilization poll of %s failed: %s", ref, exc)
                utilization[ref] = None
        with self._lock:
            actions = pressure_tick(self.tracker, utilization, self.config.tau_pressure)
            ts = self.clock.now() if self.clock else 0.0
            for a in actions:
                self.log.append({"ts": ts, "signal": "pressure_tick", "workflow_id": a.target[0],
                                 "stage_id": None, **a.to_dict()})
        for a in actions:
            await self.apply_action(a)
        return actions

    async def _monitor_loop(self) -> None:
        while True:
            await self.clock.sleep(self.config.monitor_interval_ms)
            await self.tick()

    def start_monitor(self) -> asyncio.Task | None:
        if self.clock is None or self.config.monitor_interval_ms <= 0:
            return None
        if self._monitor is None or self._monitor.done():
            self._monitor = asyncio.get_running_loop().create_task(self._monitor_loop())
        return self._monitor

    async def stop_monitor(self) -> None:
        if self._monitor is not None:
            self._monitor.cancel()
            try:
                await self._monitor
            except asyncio.CancelledError:
                pass
            self._monitor = None

    def export_log(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def apply_action(action: CacheAction, backends: Mapping[str, Backend]):
    """Coroutine applying one action directly, without a manager."""
    return MemoryManager(backends).apply_action(action)
