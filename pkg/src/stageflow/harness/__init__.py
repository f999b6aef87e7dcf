from stageflow.harness.config import BenchmarkConfig, ConfigError, bundled_config, load_config, parse_config
from stageflow.harness.metrics import (
    MetricsReport,
    ReportFormat,
    UnpricedModel,
    UsageRecord,
    cdf_points,
    emit_report,
    estimate_cost,
    nearest_rank,
)
from stageflow.harness.runner import MeteredBackend, run_benchmark
from stageflow.harness.templates import TEMPLATES, make_templates
from stageflow.harness.trace import (
    ParseError,
    TraceRecord,
    UnknownTemplate,
    generate_trace,
    load_trace,
    write_trace,
)

__all__ = [
    "BenchmarkConfig",
    "ConfigError",
    "MeteredBackend",
    "MetricsReport",
    "ParseError",
    "ReportFormat",
    "TEMPLATES",
    "TraceRecord",
    "UnknownTemplate",
    "UnpricedModel",
    "UsageRecord",
    "bundled_config",
    "cdf_points",
    "emit_report",
    "estimate_cost",
    "generate_trace",
    "load_config",
    "load_trace",
    "make_templates",
    "nearest_rank",
    "parse_config",
    "run_benchmark",
    "write_trace",
]
