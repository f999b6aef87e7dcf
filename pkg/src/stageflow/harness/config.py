"""Benchmark configuration: backends, mapper, scheduling, memory and templates.

Configs are YAML (or JSON, which YAML also parses). See
``stageflow/configs/example.yaml`` for a commented example of every field.

An endpoint can be overridden per backend with ``STAGEFLOW_ENDPOINT_<REF>``
(ref upper-cased, non-alphanumerics replaced by ``_``); setting it turns that
backend into an HTTP backend pointed at the given URL.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from stageflow.backends.simulated import OutputTokens, SimulatedBackendConfig
from stageflow.mapper import BackendDescriptor, BackendKind, BackendRegistry, Price, Tier
from stageflow.memory import MemoryConfig

ENV_PREFIX = "STAGEFLOW_ENDPOINT_"


class ConfigError(ValueError):
    pass


def endpoint_env_var(ref: str) -> str:
    return ENV_PREFIX + re.sub(r"[^A-Za-z0-9]", "_", ref).upper()


@dataclass(frozen=True)
class BackendConfig:
    ref: str
    model: str
    kind: BackendKind = BackendKind.SIMULATED
    tier: Tier = Tier.HEAVY
    endpoint: str = ""
    context_limit_tokens: int = 32768
    price: Price = field(default_factory=Price)
    sim: SimulatedBackendConfig = field(default_factory=SimulatedBackendConfig)
    max_concurrency: int = 1
    cache_api: str = "none"

    def descriptor(self) -> BackendDescriptor:
        return BackendDescriptor(
            self.ref, self.model, self.kind, self.endpoint, self.context_limit_tokens, self.price, self.tier
        )


@dataclass(frozen=True)
class MapperConfig:
    # explicit | one_bit | threshold
    kind: str = "explicit"
    light: str = ""
    heavy: str = ""
    classifier: str = ""
    threshold: float = 0.0
    # stage ids routed per request; empty means every stage
    stages: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in ("explicit", "one_bit", "threshold"):
            raise ConfigError(f"unknown mapper kind {self.kind!r}")
        if self.kind != "explicit" and not (self.light and self.heavy):
            raise ConfigError(f"mapper {self.kind!r} needs light and heavy backends")


@dataclass(frozen=True)
class BenchmarkConfig:
    backends: dict[str, BackendConfig]
    mapper: MapperConfig = field(default_factory=MapperConfig)
    stage_policy: str = "fcfs"
    request_policy: str = "fcfs"
    memory_enabled: bool = True
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    templates: dict[str, dict[str, Any]] = field(default_factory=dict)
    reroute_limit: int = 32
    alternates: dict[str, list[str]] = field(default_factory=dict)
    name: str = ""

    def registry(self) -> BackendRegistry:
        return BackendRegistry(self.backends[r].descriptor() for r in sorted(self.backends))

    def prices(self) -> dict[str, Price]:
        return {b.model: b.price for b in self.backends.values()}


def _get(d: Mapping[str, Any], key: str, default: Any, where: str) -> Any:
    if not isinstance(d, Mapping):
        raise ConfigError(f"{where} must be a mapping")
    return d.get(key, default)


def _backend(ref: str, raw: Mapping[str, Any], env: Mapping[str, str]) -> BackendConfig:
    where = f"backends.{ref}"
    if "model" not in raw:
        raise ConfigError(f"{where}: model is required")
    kind = raw.get("kind", "simulated")
    endpoint = raw.get("endpoint") or ""
    override = env.get(endpoint_env_var(ref))
    if override:
        kind, endpoint = "http", override
    latency = _get(raw, "latency", {}, where) or {}
    out_raw = raw.get("output_tokens", {}) or {}
    try:
        sim = SimulatedBackendConfig(
            prefill_ms_per_token=float(latency.get("prefill_ms_per_token", 1.0)),
            decode_ms_per_token=float(latency.get("decode_ms_per_token", 10.0)),
            fixed_overhead_ms=float(latency.get("fixed_overhead_ms", 0.0)),
            max_concurrency=int(raw.get("max_concurrency", 1)),
            cache_capacity_tokens=int(raw.get("cache_capacity_tokens", 1_000_000)),
            output_tokens=OutputTokens(
                out_raw.get("rule", "from_trace"),
                int(out_raw.get("value", 64)),
                out_raw.get("field", "expected_output_tokens"),
            ),
        )
        price_raw = raw.get("price", {}) or {}
        price = Price(float(price_raw.get("input_per_1m", 0.0)), float(price_raw.get("output_per_1m", 0.0)))
        return BackendConfig(
            ref=ref,
            model=str(raw["model"]),
            kind=BackendKind(kind),
            tier=Tier(raw.get("tier", "heavy")),
            endpoint=endpoint,
            context_limit_tokens=int(raw.get("context_limit_tokens", 32768)),
            price=price,
            sim=sim,
            max_concurrency=int(raw.get("max_concurrency", 1)),
            cache_api=raw.get("cache_api", "none"),
        )
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_config(raw: Mapping[str, Any], env: Mapping[str, str] | None = None, name: str = "") -> BenchmarkConfig:
    env = os.environ if env is None else env
    if not isinstance(raw, Mapping):
        raise ConfigError("config root must be a mapping")
    backends_raw = raw.get("backends") or {}
    if not backends_raw:
        raise ConfigError("config declares no backends")
    backends = {ref: _backend(ref, b or {}, env) for ref, b in backends_raw.items()}

    m = raw.get("mapper") or {}
    mapper = MapperConfig(
        kind=m.get("kind", "explicit"),
        light=m.get("light", ""),
        heavy=m.get("heavy", ""),
        classifier=m.get("classifier", m.get("light", "")),
        threshold=float(m.get("threshold", 0.0)),
        stages=tuple(m.get("stages") or ()),
    )
    for ref in (mapper.light, mapper.heavy, mapper.classifier):
        if ref and ref not in backends:
            raise ConfigError(f"mapper references unknown backend {ref!r}")

    sched = raw.get("scheduler") or {}
    mem = raw.get("memory") or {}
    try:
        memory = MemoryConfig(
            tau=int(mem.get("tau", 512)),
            tau_pressure=float(mem.get("tau_pressure", 0.85)),
            monitor_interval_ms=float(mem.get("monitor_interval_ms", 100.0)),
            policy_chain=tuple(mem.get("policy_chain", ("preserve_small_increment", "flush_at_boundary"))),
        )
    except ValueError as exc:
        raise ConfigError(f"memory: {exc}") from exc

    orch = raw.get("orchestrator") or {}
    alternates = {k: list(v) for k, v in (orch.get("alternates") or {}).items()}
    for primary, alts in alternates.items():
        for ref in (primary, *alts):
            if ref not in backends:
                raise ConfigError(f"orchestrator.alternates references unknown backend {ref!r}")

    templates = {k: dict(v or {}) for k, v in (raw.get("templates") or {}).items()}
    return BenchmarkConfig(
        backends=backends,
        mapper=mapper,
        stage_policy=sched.get("stage_policy", "fcfs"),
        request_policy=sched.get("request_policy", "fcfs"),
        memory_enabled=bool(mem.get("enabled", True)),
        memory=memory,
        templates=templates,
        reroute_limit=int(orch.get("reroute_limit", 32)),
        alternates=alternates,
        name=raw.get("name", name),
    )


def load_config(path: str | Path, env: Mapping[str, str] | None = None) -> BenchmarkConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw, env, name=path.stem)


def bundled_config(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``bundled_config("mapped")``."""
    path = Path(__file__).resolve().parent.parent / "configs" / f"{name}.yaml"
    if not path.exists():
        raise FileNotFoundError(path)
    return path
