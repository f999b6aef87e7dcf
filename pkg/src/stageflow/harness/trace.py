"""Line-delimited JSON traces.

Each non-blank line is one object::

    {"workflow_template": "single_shot_patch", "arrival_ms": 0,
     "payload": {"prompt_tokens": 180, "expected_output_tokens": 120, "complexity": "simple"}}

``payload`` is handed to the template; which keys matter is template-specific.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable


class TraceError(Exception):
    pass


class ParseError(TraceError):
    def __init__(self, line: int, cause: str):
        self.line = line
        self.cause = cause
        super().__init__(f"line {line}: {cause}")


class UnknownTemplate(TraceError):
    def __init__(self, name: str, line: int | None = None):
        self.name = name
        self.line = line
        super().__init__(f"unknown workflow template {name!r}" + (f" (line {line})" if line else ""))


@dataclass(frozen=True)
class TraceRecord:
    workflow_template: str
    arrival_ms: int
    payload: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {"workflow_template": self.workflow_template, "arrival_ms": self.arrival_ms, "payload": self.payload},
            sort_keys=True,
        )


def _record(obj: Any, line: int) -> TraceRecord:
    if not isinstance(obj, dict):
        raise ParseError(line, "record is not an object")
    name = obj.get("workflow_template")
    if not isinstance(name, str) or not name:
        raise ParseError(line, "missing workflow_template")
    arrival = obj.get("arrival_ms", 0)
    if isinstance(arrival, bool) or not isinstance(arrival, int) or arrival < 0:
        raise ParseError(line, f"arrival_ms must be a non-negative integer, got {arrival!r}")
    payload = obj.get("payload", {})
    if not isinstance(payload, dict):
        raise ParseError(line, "payload must be an object")
    return TraceRecord(name, arrival, payload)


def parse_trace(lines: Iterable[str], templates: Iterable[str] | None = None) -> list[TraceRecord]:
    known = set(templates) if templates is not None else None
    records = []
    for no, text in enumerate(lines, start=1):
        if not text.strip():
            continue
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(no, str(exc)) from exc
        rec = _record(obj, no)
        if known is not None and rec.workflow_template not in known:
            raise UnknownTemplate(rec.workflow_template, no)
        records.append(rec)
    # sorted() is stable, so equal arrivals keep file order
    return sorted(records, key=lambda r: r.arrival_ms)


def load_trace(path: str | Path, templates: Iterable[str] | None = None) -> list[TraceRecord]:
    """Parse a trace file and return its records in arrival order.

    Raises:
        ParseError: with the 1-based line number of the first bad line.
        UnknownTemplate: if ``templates`` is given and a record names another.
    """
    with open(path, encoding="utf-8") as fh:
        return parse_trace(fh, templates)


def write_trace(records: Iterable[TraceRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def generate_trace(
    template: str,
    n: int,
    seed: int = 0,
    *,
    simple: int | None = None,
    prompt_tokens: tuple[int, int] = (150, 250),
    output_tokens: tuple[int, int] = (80, 160),
    arrival_rate_per_s: float = 0.0,
    categories: tuple[str, ...] = ("billing", "technical", "general", "account"),
) -> list[TraceRecord]:
    """Synthetic trace. ``simple`` requests (chosen at random) are labelled simple, the rest complex.

    With ``arrival_rate_per_s`` = 0 everything arrives at t=0, otherwise
    arrivals follow a Poisson process at that rate.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    rng = random.Random(seed)
    simple = n // 2 if simple is None else simple
    if not 0 <= simple <= n:
        raise ValueError("simple must be between 0 and n")
    simple_idx = set(rng.sample(range(n), simple))
    t = 0.0
    out = []
    for i in range(n):
        if arrival_rate_per_s > 0:
            t += rng.expovariate(arrival_rate_per_s) * 1000.0
        payload = {
            "prompt_tokens": rng.randint(*prompt_tokens),
            "expected_output_tokens": rng.randint(*output_tokens),
            "complexity": "simple" if i in simple_idx else "complex",
            "category": rng.choice(categories),
            "request_id": f"req-{i:05d}",
        }
        out.append(TraceRecord(template, int(t), payload))
    return out
