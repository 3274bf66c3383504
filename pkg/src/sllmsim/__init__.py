"""Loading-optimized checkpoints, live migration, and a startup-time-aware
cluster scheduling simulator for serverless LLM inference."""

from .checkpoint import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointIntegrityError,
    CheckpointManifest,
    TensorSpec,
    build_manifest,
    convert_from_naive,
    read_manifest,
    write_checkpoint,
)
from .cluster import (
    ClusterState,
    ModelInfo,
    ServerState,
    SlotState,
    TierKind,
    TierSpec,
)
from .config import (
    ConfigError,
    FailureInjection,
    SimConfig,
    build_cluster,
    load_cluster_config,
    load_failure_plan,
    parse_cluster_config,
    parse_failure_plan,
)
from .engine import EngineParams, InferenceTask, TaskState, next_token
from .loading import execute_load, naive_load, plan_load, run_load_bench
from .metrics import Metrics, RequestOutcome, RequestRecord, percentile
from .migration import (
    MigrationFlag,
    MigrationOutcome,
    MigrationPhase,
    MigrationSession,
    drive_migration,
    expected_rounds,
)
from .routing import InferenceResponse, ResponseFlag, Router
from .scheduling import (
    CandidatePlan,
    PlanKind,
    Policy,
    calibrate_resume_params,
    enumerate_plans,
    est_load_time,
    est_out_tokens,
    est_resume_time,
    select_plan,
)
from .simulation import SimulationResult, compare_policies, run_simulation
from .trace import TraceGenSpec, TraceRecord, generate_trace, load_trace, write_trace

__version__ = "0.1.0"

__all__ = [
    "CandidatePlan",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointIntegrityError",
    "CheckpointManifest",
    "ClusterState",
    "ConfigError",
    "EngineParams",
    "FailureInjection",
    "InferenceResponse",
    "InferenceTask",
    "Metrics",
    "MigrationFlag",
    "MigrationOutcome",
    "MigrationPhase",
    "MigrationSession",
    "ModelInfo",
    "PlanKind",
    "Policy",
    "RequestOutcome",
    "RequestRecord",
    "ResponseFlag",
    "Router",
    "ServerState",
    "SimConfig",
    "SimulationResult",
    "SlotState",
    "TaskState",
    "TensorSpec",
    "TierKind",
    "TierSpec",
    "TraceGenSpec",
    "TraceRecord",
    "build_cluster",
    "build_manifest",
    "calibrate_resume_params",
    "compare_policies",
    "convert_from_naive",
    "drive_migration",
    "enumerate_plans",
    "est_load_time",
    "est_out_tokens",
    "est_resume_time",
    "execute_load",
    "expected_rounds",
    "generate_trace",
    "load_cluster_config",
    "load_failure_plan",
    "load_trace",
    "naive_load",
    "next_token",
    "parse_cluster_config",
    "parse_failure_plan",
    "percentile",
    "plan_load",
    "read_manifest",
    "run_load_bench",
    "run_simulation",
    "select_plan",
    "write_checkpoint",
    "write_trace",
]
