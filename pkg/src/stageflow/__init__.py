"""Serving multi-stage LLM workflows: stage mapping, two-level scheduling and workflow-aware KV-cache management."""

from stageflow.clock import VirtualClock, WallClock, make_clock
from stageflow.mapper import (
    BackendDescriptor,
    BackendKind,
    BackendRegistry,
    MappingPlan,
    OneBitMapper,
    Price,
    ThresholdMapper,
    Tier,
    map_one_bit,
    map_threshold,
    plan_explicit,
    with_router,
)
from stageflow.memory import CacheAction, MemoryConfig, MemoryManager, WorkflowTracker, on_signal, pressure_tick
from stageflow.orchestrator import (
    ExecutionReport,
    MaxTurnsExceeded,
    Orchestrator,
    StageFailed,
    ToolNotFound,
    execute_tool,
    execute_workflow,
    reroute_on_overload,
    run_agent_loop,
    run_stage,
)
from stageflow.scheduler import BackendQueue, PolicyRegistry, QueuedRequest
from stageflow.signals import LifecycleSignal, SignalKind
from stageflow.workflow import (
    CachePolicy,
    ExecutionMode,
    InferenceParams,
    Message,
    SchedulingHints,
    StageResult,
    StageSpec,
    ToolCall,
    ToolResult,
    ToolSpec,
    ValidatedWorkflow,
    WorkflowSpec,
    build_context,
    ready_stages,
    validate_workflow,
)

__version__ = "0.1.0"
