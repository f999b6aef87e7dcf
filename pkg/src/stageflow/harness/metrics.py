"""Benchmark metrics, cost estimation and report output."""

from __future__ import annotations

import csv
import enum
import json
import math
import statistics
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from stageflow.mapper import Price


class UnpricedModel(KeyError):
    def __init__(self, model: str):
        self.model = model
        super().__init__(f"no price for model {model!r}")


@dataclass(frozen=True)
class UsageRecord:
    model: str
    prompt_tokens: int
    completion_tokens: int
    cached_prefix_tokens: int = 0
    purpose: str = "stage"


def estimate_cost(usage: Iterable[UsageRecord], prices: Mapping[str, Price]) -> float:
    """Sum of prompt and completion tokens times per-million prices."""
    total = 0.0
    for u in usage:
        price = prices.get(u.model)
        if price is None:
            raise UnpricedModel(u.model)
        total += (u.prompt_tokens * price.input_per_1m + u.completion_tokens * price.output_per_1m) / 1e6
    return total


def nearest_rank(sorted_values: Sequence[float], p: float) -> float:
    """Smallest sample with at least ``p`` percent of samples at or below it."""
    if not sorted_values:
        raise ValueError("no samples")
    if not 0 < p <= 100:
        raise ValueError("percentile must be in (0, 100]")
    k = math.ceil(p / 100 * len(sorted_values))
    return sorted_values[max(k, 1) - 1]


def cdf_points(samples: Iterable[float], grid: Iterable[int] = range(1, 100)) -> list[tuple[int, float]]:
    values = sorted(samples)
    if not values:
        return []
    return [(p, nearest_rank(values, p)) for p in grid]


@dataclass(frozen=True)
class TtftSample:
    workflow_id: str
    stage_id: str
    backend: str
    ttft_ms: float


@dataclass(frozen=True)
class Completion:
    workflow_id: str
    template: str
    arrival_ms: float
    end_ms: float
    status: str

    @property
    def completion_ms(self) -> float:
        return self.end_ms - self.arrival_ms


@dataclass
class BackendUsage:
    model: str
    calls: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    cached_prefix_tokens: int = 0
    cost: float = 0.0


@dataclass
class MetricsReport:
    config_name: str = ""
    seed: int = 0
    ttft: list[TtftSample] = field(default_factory=list)
    completions: list[Completion] = field(default_factory=list)
    makespan_ms: float = 0.0
    usage: dict[str, BackendUsage] = field(default_factory=dict)
    # stage executions per backend ref
    routing: dict[str, int] = field(default_factory=dict)
    # backend refs in display order (light tier first)
    routing_order: list[str] = field(default_factory=list)

    @property
    def cost(self) -> float:
        return sum(u.cost for u in self.usage.values())

    @property
    def requests(self) -> int:
        return sum(self.routing.values())

    @property
    def mean_completion_ms(self) -> float:
        return statistics.fmean(c.completion_ms for c in self.completions) if self.completions else 0.0

    @property
    def median_completion_ms(self) -> float:
        return statistics.median(c.completion_ms for c in self.completions) if self.completions else 0.0

    @property
    def failed_workflows(self) -> int:
        return sum(1 for c in self.completions if c.status != "ok")

    def cdf(self) -> list[tuple[int, float]]:
        return cdf_points(s.ttft_ms for s in self.ttft)

    def ttft_percentile(self, p: float) -> float:
        values = sorted(s.ttft_ms for s in self.ttft)
        return nearest_rank(values, p) if values else 0.0

    def routing_split(self) -> str:
        order = self.routing_order or sorted(self.routing)
        return " / ".join(f"{self.routing.get(ref, 0)} {ref}" for ref in order)

    def summary(self) -> dict[str, Any]:
        return {
            "config": self.config_name,
            "seed": self.seed,
            "workflows": len(self.completions),
            "failed_workflows": self.failed_workflows,
            "requests": self.requests,
            "makespan_ms": self.makespan_ms,
            "mean_completion_ms": self.mean_completion_ms,
            "median_completion_ms": self.median_completion_ms,
            "cost": self.cost,
            "routing_split": self.routing_split(),
        }


class ReportFormat(str, enum.Enum):
    JSONL = "jsonl"
    CSV = "csv"
    SUMMARY = "summary"


def _jsonl_lines(report: MetricsReport) -> list[dict[str, Any]]:
    lines: list[dict[str, Any]] = [{"type": "summary", **report.summary()}]
    for ref in sorted(report.usage):
        u = report.usage[ref]
        lines.append({"type": "usage", "backend": ref, **u.__dict__})
    for ref in sorted(report.routing):
        lines.append({"type": "routing", "backend": ref, "count": report.routing[ref]})
    for c in report.completions:
        lines.append({"type": "completion", "workflow_id": c.workflow_id, "template": c.template,
                      "arrival_ms": c.arrival_ms, "end_ms": c.end_ms, "completion_ms": c.completion_ms,
                      "status": c.status})
    for s in report.ttft:
        lines.append({"type": "ttft", **s.__dict__})
    for p, v in report.cdf():
        lines.append({"type": "cdf", "percentile": p, "ttft_ms": v})
    return lines


def render_jsonl(report: MetricsReport) -> str:
    return "".join(json.dumps(line, sort_keys=True) + "\n" for line in _jsonl_lines(report))


def render_summary(report: MetricsReport) -> str:
    s = report.summary()
    rows = [
        ("config", s["config"] or "-"),
        ("workflows", f"{s['workflows']} ({s['failed_workflows']} failed)"),
        ("requests", str(s["requests"])),
        ("makespan", f"{s['makespan_ms']:.1f} ms"),
        ("mean completion", f"{s['mean_completion_ms']:.1f} ms"),
        ("median completion", f"{s['median_completion_ms']:.1f} ms"),
        ("ttft p50 / p90 / p99", " / ".join(f"{report.ttft_percentile(p):.1f}" for p in (50, 90, 99)) + " ms"),
        ("cost", f"{s['cost']:.6f}"),
        ("routing split", s["routing_split"] or "-"),
    ]
    width = max(len(k) for k, _ in rows)
    out = [f"{k.ljust(width)}  {v}" for k, v in rows]
    for ref in sorted(report.usage):
        u = report.usage[ref]
        out.append(f"{('usage ' + ref).ljust(width)}  {u.calls} calls, {u.prompt_tokens} in "
                   f"({u.cached_prefix_tokens} cached), {u.completion_tokens} out, cost {u.cost:.6f}")
    return "\n".join(out) + "\n"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_csv(report: MetricsReport, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    _write_csv(directory / "ttft.csv", ("workflow_id", "stage_id", "backend", "ttft_ms"),
               ((s.workflow_id, s.stage_id, s.backend, s.ttft_ms) for s in report.ttft))
    _write_csv(directory / "cdf.csv", ("percentile", "ttft_ms"), report.cdf())
    _write_csv(directory / "completions.csv",
               ("workflow_id", "template", "arrival_ms", "end_ms", "completion_ms", "status"),
               ((c.workflow_id, c.template, c.arrival_ms, c.end_ms, c.completion_ms, c.status)
                for c in report.completions))
    _write_csv(directory / "usage.csv",
               ("backend", "model", "calls", "prompt_tokens", "completion_tokens", "cached_prefix_tokens", "cost"),
               ((ref, u.model, u.calls, u.prompt_tokens, u.completion_tokens, u.cached_prefix_tokens, u.cost)
                for ref, u in sorted(report.usage.items())))
    _write_csv(directory / "routing.csv", ("backend", "count"), sorted(report.routing.items()))


def emit_report(report: MetricsReport, fmt: ReportFormat | str, path: str | Path | None) -> None:
    """Write ``report``. CSV output is a directory of files; ``None`` or ``-`` means stdout for the others."""
    fmt = ReportFormat(fmt)
    if fmt is ReportFormat.CSV:
        if path in (None, "-"):
            raise ValueError("csv output needs a directory path")
        write_csv(report, Path(path))
        return
    text = render_jsonl(report) if fmt is ReportFormat.JSONL else render_summary(report)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")
