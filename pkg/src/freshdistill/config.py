"""Experiment files: a versioned YAML schema validated before anything runs.

A config fully describes one experiment: the task, the trainer settings, the
freshness and refresh parameters, the pipeline cost model used for throughput
accounting, the seed list, and the output directory. Every section is checked
for unknown keys and for value errors up front, so a bad file fails with a
diagnostic instead of dying mid-run. The original file text is kept verbatim
and written into the artifact directory, making every run reproducible from
its own output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import yaml

from .buffer import RefreshPolicy
from .env import TaskSpec, task_from_dict
from .freshness import FreshnessConfig
from .pipeline import ScheduleConfig
from .trainer import TrainerConfig

SCHEMA_VERSION = 1

_TRAINER_TYPES = {
    "mode": str, "loss_kind": str, "anchor_weight": float,
    "learning_rate": float, "momentum": float, "temperature": float,
    "batch_size": int, "steps": int, "lag": int, "eval_every": int,
    "hard_refresh_every": int, "buffer_capacity": int,
    "use_weighting": bool, "use_anchor": bool, "use_adaptive_refresh": bool,
    "use_relabel": bool, "lag_only_score": bool,
}
_FRESHNESS_TYPES = {"alpha": float, "beta": float, "xi": float}
_REFRESH_TYPES = {"kappa_f": float, "kappa_roll": float, "kappa_sup": float,
                  "cooldown_steps": int}
_PIPELINE_TYPES = {"rollout_groups": int, "grade_groups": int,
                   "buffer_depth": int, "refresh_cost": float, "lag_cap": int}
_TOP_KEYS = {"schema", "label", "task", "trainer", "freshness", "refresh",
             "pipeline", "seeds", "out"}


class ConfigError(ValueError):
    """A config file failed validation; carries per-field diagnostics."""

    def __init__(self, diagnostics: list[str] | str):
        if isinstance(diagnostics, str):
            diagnostics = [diagnostics]
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


@dataclass(frozen=True)
class ExperimentConfig:
    """A parsed, validated experiment file."""

    label: str
    task: TaskSpec
    trainer: TrainerConfig
    pipeline: dict
    seeds: tuple[int, ...]
    out_dir: str | None
    source_text: str

    def schedule_overrides(self) -> dict:
        """Pipeline cost-model knobs to merge into a ScheduleConfig."""
        return dict(self.pipeline)


def _require_mapping(value, name: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(value).__name__}")
    return value


def _check_section(section: dict, types: dict[str, type], name: str) -> None:
    """Reject unknown keys and wrongly typed values with dotted diagnostics.

    Floats accept ints; bools are not numbers. A plain-YAML quirk this guards
    against: an exponent without a sign (``1.0e308``) parses as a string.
    """
    unknown = set(section) - set(types)
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    for key, value in section.items():
        want = types[key]
        if want is bool:
            ok = isinstance(value, bool)
        elif want is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif want is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            ok = isinstance(value, want)
        if not ok:
            raise ConfigError(f"{name}.{key}: expected {want.__name__}, "
                              f"got {type(value).__name__} {value!r}")


def parse_config(text: str, *, default_label: str = "experiment") -> ExperimentConfig:
    """Parse and validate an experiment file from its text."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"not valid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a mapping")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"top level: unknown keys {sorted(unknown)}")

    schema = doc.get("schema")
    if schema != SCHEMA_VERSION:
        raise ConfigError(
            f"schema: expected version {SCHEMA_VERSION}, got {schema!r}")

    label = doc.get("label", default_label)
    if not isinstance(label, str) or not label:
        raise ConfigError("label: expected a nonempty string")

    if "task" not in doc:
        raise ConfigError("task: section is required")
    task_section = _require_mapping(doc["task"], "task")
    try:
        task = task_from_dict(task_section)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"task: {exc}") from exc

    if "trainer" not in doc:
        raise ConfigError("trainer: section is required")
    trainer_section = _require_mapping(doc["trainer"], "trainer")
    _check_section(trainer_section, _TRAINER_TYPES, "trainer")
    if "mode" not in trainer_section:
        raise ConfigError("trainer.mode: required")

    freshness_section = _require_mapping(doc.get("freshness"), "freshness")
    _check_section(freshness_section, _FRESHNESS_TYPES, "freshness")
    refresh_section = _require_mapping(doc.get("refresh"), "refresh")
    _check_section(refresh_section, _REFRESH_TYPES, "refresh")
    try:
        freshness = FreshnessConfig(**freshness_section)
        refresh_policy = RefreshPolicy(**refresh_section)
        trainer = TrainerConfig(freshness=freshness, refresh_policy=refresh_policy,
                                **trainer_section)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"trainer: {exc}") from exc

    pipeline_section = _require_mapping(doc.get("pipeline"), "pipeline")
    _check_section(pipeline_section, _PIPELINE_TYPES, "pipeline")
    # surface bad values now rather than inside a later simulation
    try:
        overrides = dict(pipeline_section)
        overrides["buffer_depth"] = max(overrides.get("buffer_depth", 4),
                                        trainer.lag + 1)
        ScheduleConfig(mode="async", forced_lag=trainer.lag,
                       batch_size=trainer.batch_size, horizon=task.horizon,
                       **overrides)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"pipeline: {exc}") from exc

    seeds_value = doc.get("seeds", [0])
    if isinstance(seeds_value, int):
        seeds_value = list(range(seeds_value))
    if (not isinstance(seeds_value, list) or not seeds_value
            or not all(isinstance(s, int) and s >= 0 for s in seeds_value)):
        raise ConfigError("seeds: expected a nonempty list of ints >= 0, "
                          "or an int count")
    if len(set(seeds_value)) != len(seeds_value):
        raise ConfigError("seeds: duplicate entries")

    out_dir = doc.get("out")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("out: expected a path string")

    return ExperimentConfig(
        label=label,
        task=task,
        trainer=trainer,
        pipeline=dict(pipeline_section),
        seeds=tuple(seeds_value),
        out_dir=out_dir,
        source_text=text,
    )


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate an experiment file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, default_label=path.stem)


def write_config_copy(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    """Write the verbatim source text into the artifact directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = out / "config.yaml"
    target.write_text(cfg.source_text)
    return target


def with_overrides(cfg: ExperimentConfig, *, mode: str | None = None,
                   lag: int | None = None, n_seeds: int | None = None,
                   out_dir: str | None = None) -> ExperimentConfig:
    """Apply command-line overrides, revalidating the trainer settings."""
    trainer = cfg.trainer
    updates = {}
    if mode is not None:
        updates["mode"] = mode
    if lag is not None:
        updates["lag"] = lag
    if updates:
        need = (updates.get("lag", trainer.lag) + 1) * trainer.batch_size
        updates["buffer_capacity"] = max(trainer.buffer_capacity, need)
        try:
            trainer = dataclasses.replace(trainer, **updates)
        except ValueError as exc:
            raise ConfigError(f"trainer: {exc}") from exc
    seeds = cfg.seeds if n_seeds is None else tuple(range(n_seeds))
    if not seeds:
        raise ConfigError("seeds: expected a positive count")
    return dataclasses.replace(
        cfg, trainer=trainer, seeds=seeds,
        out_dir=cfg.out_dir if out_dir is None else out_dir)


EXAMPLE_CONFIG = """\
schema: 1
label: quick-fopd
task:
  family: tool-analog
  seed: 0
trainer:
  mode: f-opd
  steps: 200
  batch_size: 16
  lag: 4
  learning_rate: 0.05
  eval_every: 10
  buffer_capacity: 128
freshness:
  alpha: 1.0
  beta: 1.0
  xi: 0.05
refresh:
  kappa_f: 0.1
  kappa_roll: 0.5
  kappa_sup: 0.5
  cooldown_steps: 20
pipeline:
  rollout_groups: 2
  grade_groups: 2
seeds: [0, 1, 2]
out: runs/quick-fopd
"""
