"""Discrete-event simulator for early-exit LLM serving with dynamic rebatching."""

from .cost_model import (
    CostParams,
    LatencyProfile,
    art_from_estimates,
    calibrate,
    overhead_from_estimates,
    prime_profile_from_params,
    simulated_iteration_time,
)
from .engine import Engine, EngineConfig, RunResult, run
from .kv_ledger import FillMode, KVLedger, MemStats, SlotState
from .policy import Action, EEMask, Policy, PolicyOutcome, apply_policy, individual_decisions
from .report import MetricsReport, replay_events
from .scheduler import (
    BufferEntry,
    IterationPlan,
    PlanKind,
    RequestState,
    RequestStatus,
    Scheduler,
    SchedulerConfig,
    should_flush,
)
from .workload import (
    ArrivalSpec,
    ConfidenceSpec,
    LengthSpec,
    RampConfig,
    Request,
    WorkloadConfig,
    generate_workload,
    load_trace,
    save_trace,
)

__version__ = "0.1.0"
