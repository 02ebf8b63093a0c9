"""Freshness-aware asynchronous on-policy distillation on enumerable tasks."""

from .buffer import Buffer, BufferedSample, MissingSnapshotError, RefreshPolicy
from .categorical import TruncationConfig, default_truncation, kl, pinsker_margin, tv
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .env import StepState, TaskSpec, build_teacher, make_task, rollout, task_from_dict
from .estimator import PolicyDistiller, pilot_grid_search
from .freshness import FreshnessConfig, FreshnessReport, build_report, gate
from .metrics import SummaryRow, build_summary, is_collapsed, verify_artifacts
from .oracle import (
    BoundConstants,
    check_decomposition,
    check_horizon_compounding,
    check_lag_budget,
    exact_objectives,
    loss_constants,
    run_verification,
)
from .pipeline import ScheduleConfig, StageLatencyModel, simulate, throughput_report
from .policy import PolicyParams, PolicySnapshot, snapshot
from .trainer import (
    MODES,
    DivergenceError,
    RunResult,
    StepRecord,
    Trainer,
    TrainerConfig,
    run,
)

__version__ = "0.1.0"

__all__ = [
    "Buffer", "BufferedSample", "MissingSnapshotError", "RefreshPolicy",
    "TruncationConfig", "default_truncation", "kl", "pinsker_margin", "tv",
    "ConfigError", "ExperimentConfig", "load_config", "parse_config",
    "StepState", "TaskSpec", "build_teacher", "make_task", "rollout",
    "task_from_dict", "PolicyDistiller", "pilot_grid_search",
    "FreshnessConfig", "FreshnessReport", "build_report", "gate",
    "SummaryRow", "build_summary", "is_collapsed", "verify_artifacts",
    "BoundConstants", "check_decomposition", "check_horizon_compounding",
    "check_lag_budget", "exact_objectives", "loss_constants", "run_verification",
    "ScheduleConfig", "StageLatencyModel", "simulate", "throughput_report",
    "PolicyParams", "PolicySnapshot", "snapshot",
    "MODES", "DivergenceError", "RunResult", "StepRecord", "Trainer",
    "TrainerConfig", "run",
]
