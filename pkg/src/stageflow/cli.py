"""Command-line driver: run and compare benchmarks, lint configs, make traces, serve the simulator."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from stageflow.harness.config import ConfigError, load_config
from stageflow.harness.metrics import MetricsReport, ReportFormat, emit_report
from stageflow.harness.runner import run_benchmark
from stageflow.harness.templates import TEMPLATES, make_templates
from stageflow.harness.trace import TraceError, generate_trace, load_trace, write_trace
from stageflow.workflow import ValidationErrors


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", required=True, type=Path, help="line-delimited JSON trace")
    p.add_argument("--clock", choices=("virtual", "wall"), default="virtual")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--time-scale", type=float, default=1.0, help="wall clock only: multiply simulated sleeps")


def _run(args, config_path: Path) -> MetricsReport:
    config = load_config(config_path)
    templates = make_templates(config.templates)
    trace = load_trace(args.trace, templates)
    kwargs = {"time_scale": args.time_scale} if args.clock == "wall" else {}
    return run_benchmark(trace, templates, config, args.clock, args.seed, **kwargs)


def cmd_run(args) -> int:
    report = _run(args, args.config)
    emit_report(report, args.format, args.out)
    if args.out not in (None, "-"):
        print(f"wrote {args.format} report to {args.out}", file=sys.stderr)
    return 0


def _delta(a: float, b: float) -> str:
    if a == 0:
        return "n/a"
    return f"{(b - a) / a * 100:+.1f}%"


def cmd_compare(args) -> int:
    base = _run(args, args.baseline)
    cand = _run(args, args.candidate)
    rows = [
        ("makespan_ms", base.makespan_ms, cand.makespan_ms),
        ("mean_completion_ms", base.mean_completion_ms, cand.mean_completion_ms),
        ("median_completion_ms", base.median_completion_ms, cand.median_completion_ms),
        ("ttft_p50_ms", base.ttft_percentile(50), cand.ttft_percentile(50)),
        ("ttft_p90_ms", base.ttft_percentile(90), cand.ttft_percentile(90)),
        ("cost", base.cost, cand.cost),
    ]
    names = (base.config_name or "baseline", cand.config_name or "candidate")
    w = max(16, *(len(n) + 2 for n in names), len(base.routing_split()) + 2, len(cand.routing_split()) + 2)
    print(f"{'metric':<22}{names[0]:>{w}}{names[1]:>{w}}{'delta':>10}")
    for name, a, b in rows:
        print(f"{name:<22}{a:>{w}.6g}{b:>{w}.6g}{_delta(a, b):>10}")
    print(f"{'routing':<22}{base.routing_split():>{w}}{cand.routing_split():>{w}}")
    return 0


def cmd_validate(args) -> int:
    problems = 0
    for path in args.configs:
        try:
            config = load_config(path)
            templates = make_templates(config.templates)
            registry = config.registry()
            for name in sorted(config.templates):
                templates[name].instantiate({}, registry)
        except (ConfigError, KeyError, ValueError, OSError) as exc:
            problems += 1
            print(f"{path}: {exc}")
            continue
        except ValidationErrors as exc:
            problems += 1
            for err in exc.errors:
                print(f"{path}: {err}")
            continue
        print(f"{path}: ok ({len(config.backends)} backends, templates: {', '.join(sorted(config.templates)) or '-'})")
    if args.trace is not None:
        try:
            records = load_trace(args.trace, TEMPLATES)
            print(f"{args.trace}: ok ({len(records)} records)")
        except (TraceError, OSError) as exc:
            problems += 1
            print(f"{args.trace}: {exc}")
    return 1 if problems else 0


def cmd_gen_trace(args) -> int:
    records = generate_trace(
        args.template, args.n, args.seed, simple=args.simple, arrival_rate_per_s=args.rate,
    )
    write_trace(records, args.out)
    print(f"wrote {len(records)} records to {args.out}", file=sys.stderr)
    return 0


def cmd_serve_sim(args) -> int:
    import uvicorn

    from stageflow.backends.simulated import SimulatedBackend
    from stageflow.clock import WallClock
    from stageflow.harness.templates import classifier_script
    from stageflow.mapper import BackendKind
    from stageflow.service.app import create_app

    config = load_config(args.config)
    clock = WallClock(args.time_scale)
    templates = make_templates(config.templates)
    backends = {}
    for ref, b in sorted(config.backends.items()):
        if b.kind is not BackendKind.SIMULATED:
            continue
        sim = SimulatedBackend(ref, b.model, b.sim, clock)
        for t in templates.values():
            if t.script() is not None:
                sim.add_script(t.script())
        sim.add_script(classifier_script)
        backends[ref] = sim
    uvicorn.run(create_app(backends), host=args.host, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stageflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="replay a trace and write a metrics report")
    _add_run_args(p)
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", default="-", help="output file (directory for csv); - for stdout")
    p.add_argument("--format", choices=[f.value for f in ReportFormat], default="summary")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run one trace under two configs and print deltas")
    _add_run_args(p)
    p.add_argument("baseline", type=Path)
    p.add_argument("candidate", type=Path)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("validate", help="lint configs (and optionally a trace)")
    p.add_argument("configs", nargs="+", type=Path)
    p.add_argument("--trace", type=Path)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen-trace", help="write a synthetic trace")
    p.add_argument("--template", choices=sorted(TEMPLATES), default="single_shot_patch")
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--simple", type=int, help="how many requests are labelled simple (default n/2)")
    p.add_argument("--rate", type=float, default=0.0, help="Poisson arrivals per second; 0 = all at t=0")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("serve-sim", help="serve the config's simulated backends over HTTP")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8081)
    p.add_argument("--time-scale", type=float, default=1.0)
    p.set_defaults(func=cmd_serve_sim)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, TraceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
