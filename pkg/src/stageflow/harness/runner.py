"""Trace replay: one workflow per record, all driven by a single orchestrator."""

from __future__ import annotations

import asyncio
import logging
from typing import Any, Mapping, Sequence

from stageflow.backends.base import Backend, CompletionRequest, CompletionResponse
from stageflow.backends.http import HttpBackend
from stageflow.backends.simulated import SimulatedBackend
from stageflow.clock import make_clock
from stageflow.harness.config import BenchmarkConfig
from stageflow.harness.metrics import (
    BackendUsage,
    Completion,
    MetricsReport,
    TtftSample,
    UsageRecord,
    estimate_cost,
)
from stageflow.harness.templates import Template, classifier_script, make_templates
from stageflow.harness.trace import TraceRecord, UnknownTemplate
from stageflow.mapper import BackendKind, OneBitMapper, Router, ThresholdMapper, Tier, plan_explicit, with_router
from stageflow.memory import MemoryManager
from stageflow.orchestrator import ExecutionReport, Orchestrator
from stageflow.scheduler import PolicyRegistry, sjf_stage

logger = logging.getLogger(__name__)


class MeteredBackend(Backend):
    """Pass-through that records the usage of every response it returns."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.ref = inner.ref
        self.model = inner.model
        self.max_concurrency = inner.max_concurrency
        self.records: list[UsageRecord] = []

    async def complete(self, req: CompletionRequest) -> CompletionResponse:
        resp = await self.inner.complete(req)
        u = resp.usage
        self.records.append(UsageRecord(self.model, u.prompt_tokens, u.completion_tokens, u.cached_prefix_tokens,
                                        str(req.metadata.get("purpose", "stage"))))
        return resp

    async def flush(self, workflow_id: str | None = None) -> int:
        return await self.inner.flush(workflow_id)

    async def preserve(self, workflow_id: str) -> bool:
        return await self.inner.preserve(workflow_id)

    async def utilization(self) -> float | None:
        return await self.inner.utilization()


def build_backends(config: BenchmarkConfig, clock, templates: Mapping[str, Template]) -> dict[str, Backend]:
    out: dict[str, Backend] = {}
    scripts = [t.script() for _, t in sorted(templates.items()) if t.script() is not None]
    for ref in sorted(config.backends):
        b = config.backends[ref]
        if b.kind is BackendKind.SIMULATED:
            sim = SimulatedBackend(ref, b.model, b.sim, clock)
            for s in scripts:
                sim.add_script(s)
            sim.add_script(classifier_script)
            out[ref] = sim
        else:
            out[ref] = HttpBackend(ref, b.model, b.endpoint, clock, max_concurrency=b.max_concurrency,
                                   cache_api=b.cache_api)
    return out


def build_router(config: BenchmarkConfig, backends: Mapping[str, Backend]) -> Router | None:
    m = config.mapper
    if m.kind == "one_bit":
        return OneBitMapper(backends[m.classifier or m.light], m.light, m.heavy)
    if m.kind == "threshold":
        return ThresholdMapper(m.light, m.heavy, m.threshold)
    return None


def routing_order(config: BenchmarkConfig) -> list[str]:
    return sorted(config.backends, key=lambda r: (config.backends[r].tier is not Tier.LIGHT, r))


def aggregate(
    config: BenchmarkConfig,
    seed: int,
    runs: Sequence[tuple[str, TraceRecord, ExecutionReport | None, float]],
    metered: Mapping[str, MeteredBackend],
) -> MetricsReport:
    report = MetricsReport(config_name=config.name, seed=seed, routing_order=routing_order(config))
    prices = config.prices()
    first, last = None, None
    for wid, rec, ex, end in runs:
        if ex is None:
            report.completions.append(Completion(wid, rec.workflow_template, rec.arrival_ms, end, "error"))
            continue
        report.completions.append(
            Completion(wid, rec.workflow_template, rec.arrival_ms, ex.end_ts if ex.results else end,
                       "ok" if ex.ok else "failed")
        )
        for sid in sorted(ex.results):
            r = ex.results[sid]
            report.ttft.append(TtftSample(wid, sid, r.backend_ref, r.timing.ttft_ms))
            report.routing[r.backend_ref] = report.routing.get(r.backend_ref, 0) + 1
            first = r.timing.enqueue_ts if first is None else min(first, r.timing.enqueue_ts)
            last = r.timing.complete_ts if last is None else max(last, r.timing.complete_ts)
    report.makespan_ms = (last - first) if first is not None else 0.0

    for ref in sorted(metered):
        m = metered[ref]
        u = BackendUsage(m.model)
        for rec in m.records:
            u.calls += 1
            u.prompt_tokens += rec.prompt_tokens
            u.completion_tokens += rec.completion_tokens
            u.cached_prefix_tokens += rec.cached_prefix_tokens
        u.cost = estimate_cost(m.records, prices)
        report.usage[ref] = u
    return report


def run_benchmark(
    trace: Sequence[TraceRecord],
    templates: Mapping[str, Template] | None,
    config: BenchmarkConfig,
    clock_mode: str = "virtual",
    seed: int = 0,
    **clock_kwargs: Any,
) -> MetricsReport:
    """Replay ``trace`` against the configured backends and aggregate metrics.

    Each record starts its workflow at ``arrival_ms`` on the run's clock. Under
    the virtual clock the result depends only on trace, config and seed.
    """
    templates = templates if templates is not None else make_templates(config.templates)
    for rec in trace:
        if rec.workflow_template not in templates:
            raise UnknownTemplate(rec.workflow_template)
    clock = make_clock(clock_mode, **clock_kwargs)
    registry = config.registry()

    async def main() -> MetricsReport:
        raw = build_backends(config, clock, templates)
        metered = {ref: MeteredBackend(b) for ref, b in raw.items()}
        policies = PolicyRegistry()
        policies.register("stage", "sjf", sjf_stage)
        memory = MemoryManager(metered, config.memory, clock) if config.memory_enabled else None
        orch = Orchestrator(
            metered, clock, memory=memory, policies=policies, alternates=config.alternates,
            reroute_limit=config.reroute_limit, stage_policy=config.stage_policy,
            request_policy=config.request_policy,
        )
        router = build_router(config, metered)

        async def one(i: int, rec: TraceRecord):
            wid = f"w{i:05d}"
            await clock.sleep_until(rec.arrival_ms)
            try:
                wf, metadata = templates[rec.workflow_template].instantiate(rec.payload, registry)
                metadata["seed"] = seed
                plan = plan_explicit(wf, registry)
                if router is not None:
                    with_router(plan, router, config.mapper.stages or wf.order)
                ex = await orch.execute_workflow(wf, plan, wid, metadata)
            except Exception as exc:
                logger.warning("workflow %s (%s) failed: %s", wid, rec.workflow_template, exc)
                return wid, rec, None, clock.now()
            return wid, rec, ex, clock.now()

        if memory is not None:
            memory.start_monitor()
        try:
            runs = await asyncio.gather(*(one(i, r) for i, r in enumerate(trace)))
        finally:
            if memory is not None:
                await memory.stop_monitor()
            for b in raw.values():
                if isinstance(b, HttpBackend):
                    await b.aclose()
        return aggregate(config, seed, runs, metered)

    return clock.run(main())
