"""Command-line experiment driver.

Subcommands:

  run        train one configuration across seeds and emit artifacts
  lag-sweep  vanilla asynchronous training at a grid of forced lags on all
             three task families
  compare    all five staleness modes on one task at a shared forced lag,
             with throughput accounting from the pipeline simulator
  ablate     incremental feature ladder from vanilla async up to the full
             freshness-aware mode
  verify     brute-force bound verification on enumerable instances
  plot       regenerate figures from an existing artifact directory

Every training command writes the same artifact set into its output
directory: the verbatim config that produced it, ``metrics.jsonl`` with one
step record per line, ``summary.csv`` with one row per arm, and SVG figures.
Exit codes: 0 success, 1 config error, 2 verification failure, 3 training
divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import (
    ConfigError,
    ExperimentConfig,
    load_config,
    with_overrides,
    write_config_copy,
)
from .env import make_task
from .metrics import (
    JSONL_NAME,
    SUMMARY_NAME,
    SummaryRow,
    build_summary,
    runs_from_jsonl,
    verify_artifacts,
    write_metrics_jsonl,
    write_summary_csv,
)
from .oracle import run_verification
from .pipeline import ScheduleConfig, simulate, throughput_report
from .trainer import MODES, DivergenceError, RunResult, Trainer, TrainerConfig
from . import plots

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_VERIFY = 2
EXIT_DIVERGED = 3

LAG_GRID = (0, 2, 4, 8)
SWEEP_FAMILIES = ("single-step", "tool-analog", "long-horizon")

# ladder of explicit toggles from vanilla async to the full method; the last
# named mode must reproduce the final rung record for record
ABLATION_RUNGS: tuple[tuple[str, dict], ...] = (
    ("async", {}),
    ("+relabel", {"use_relabel": True}),
    ("+weighting", {"use_relabel": True, "use_weighting": True}),
    ("+anchor", {"use_relabel": True, "use_weighting": True, "use_anchor": True}),
    ("+adaptive-refresh", {"use_relabel": True, "use_weighting": True,
                           "use_anchor": True, "use_adaptive_refresh": True}),
)


# -- shared helpers -----------------------------------------------------------


def _train_arm(trainer_cfg: TrainerConfig, task, seeds: Sequence[int]) -> list[RunResult]:
    return [Trainer(trainer_cfg, task, seed=seed).run() for seed in seeds]


def _fit_capacity(trainer_cfg: TrainerConfig, **updates) -> TrainerConfig:
    """Replace trainer fields, growing the buffer to hold the lag queue."""
    lag = updates.get("lag", trainer_cfg.lag)
    batch = updates.get("batch_size", trainer_cfg.batch_size)
    need = (lag + 1) * batch
    updates["buffer_capacity"] = max(trainer_cfg.buffer_capacity, need)
    return dataclasses.replace(trainer_cfg, **updates)


def _measured_refresh_period(results: Sequence[RunResult], steps: int) -> int | None:
    """Equivalent fixed refresh period for the adaptive rule, from run counts."""
    mean_count = float(np.mean([r.refresh_count for r in results]))
    if mean_count < 1.0:
        return None
    return max(1, round(steps / mean_count))


def _rel_throughput(cfg: ExperimentConfig, mode: str,
                    refresh_period: int | None, duration: float = 6000.0) -> float:
    """Completed-sample rate relative to the synchronous schedule.

    Cost accounting runs the pipeline free-running: the forced lag of the
    quality runs is a measurement protocol, not a deployment schedule, so it
    does not appear here. Refresh behavior does, as a fixed period.
    """
    over = cfg.schedule_overrides()
    shared = dict(
        rollout_groups=over.get("rollout_groups", 1),
        grade_groups=over.get("grade_groups", 1),
        refresh_cost=over.get("refresh_cost", 4.0),
        buffer_depth=over.get("buffer_depth", 4),
        batch_size=cfg.trainer.batch_size,
        horizon=cfg.task.horizon,
        seed=0,
    )
    baseline = simulate(ScheduleConfig(mode="sync", **shared), duration=duration)
    if mode == "sync":
        return throughput_report(baseline, baseline)
    trace = simulate(
        ScheduleConfig(mode="async", lag_cap=over.get("lag_cap"),
                       refresh_every=refresh_period, **shared),
        duration=duration)
    return throughput_report(trace, baseline)


def _refresh_period_for(cfg: ExperimentConfig, mode: str,
                        results: Sequence[RunResult]) -> int | None:
    if mode == "async+hard-refresh":
        return cfg.trainer.hard_refresh_every
    if mode == "f-opd":
        return _measured_refresh_period(results, cfg.trainer.steps)
    return None


def _resolve_out(cfg: ExperimentConfig, args) -> Path:
    out = args.out if args.out is not None else cfg.out_dir
    if out is None:
        raise ConfigError("out: no output directory given (flag --out or "
                          "config key 'out')")
    return Path(out)


def _print_rows(rows: Sequence[SummaryRow], file=sys.stdout) -> None:
    header = (f"{'mode':<20} {'task':<14} {'lag':>3} {'final':>9} {'std':>8} "
              f"{'drop':>8} {'collapse':>8} {'thrpt':>6} {'D_roll':>8} {'D_sup':>8}")
    print(header, file=file)
    for r in rows:
        thrpt = "-" if r.rel_throughput is None else f"{r.rel_throughput:.2f}"
        print(f"{r.mode:<20} {r.task:<14} {r.lag:>3} {r.final_mean:>9.4f} "
              f"{r.final_std:>8.4f} {r.peak_final_drop:>8.4f} "
              f"{r.collapse_ratio:>8} {thrpt:>6} {r.mean_d_roll:>8.4f} "
              f"{r.mean_d_sup:>8.4f}", file=file)


# -- experiment drivers (importable; commands wrap these) ----------------------


def run_experiment(cfg: ExperimentConfig) -> tuple[list[RunResult], SummaryRow]:
    """Train the configured arm across seeds and summarize it."""
    results = _train_arm(cfg.trainer, cfg.task, cfg.seeds)
    period = _refresh_period_for(cfg, cfg.trainer.mode, results)
    rel = _rel_throughput(cfg, cfg.trainer.mode, period)
    row = build_summary(results, cfg.task.name, cfg.trainer.lag,
                        cfg.trainer.steps, rel_throughput=rel)
    return results, row


def run_lag_sweep(cfg: ExperimentConfig, *, lags: Sequence[int] = LAG_GRID,
                  families: Sequence[str] = SWEEP_FAMILIES,
                  mode: str = "async",
                  task_overrides: dict[str, dict] | None = None,
                  ) -> dict[str, dict[int, list[RunResult]]]:
    """Train ``mode`` at each forced lag on each task family.

    ``task_overrides`` maps a family name to ``make_task`` keyword overrides,
    for sweeps on instances sized differently from the family defaults.
    """
    sweep: dict[str, dict[int, list[RunResult]]] = {}
    for family in families:
        overrides = (task_overrides or {}).get(family, {})
        task = make_task(family, seed=cfg.task.seed, **overrides)
        sweep[family] = {}
        for lag in lags:
            trainer_cfg = _fit_capacity(cfg.trainer, mode=mode, lag=lag)
            sweep[family][lag] = _train_arm(trainer_cfg, task, cfg.seeds)
    return sweep


def run_compare(cfg: ExperimentConfig, *, lag: int,
                modes: Sequence[str] = MODES) -> tuple[list[SummaryRow],
                                                       dict[str, list[RunResult]]]:
    """All staleness modes on the configured task at a shared forced lag."""
    rows = []
    by_mode: dict[str, list[RunResult]] = {}
    for mode in modes:
        mode_lag = 0 if mode == "sync" else lag
        trainer_cfg = _fit_capacity(cfg.trainer, mode=mode, lag=mode_lag)
        results = _train_arm(trainer_cfg, cfg.task, cfg.seeds)
        by_mode[mode] = results
        period = _refresh_period_for(cfg, mode, results)
        rel = _rel_throughput(cfg, mode, period)
        rows.append(build_summary(results, cfg.task.name, mode_lag,
                                  cfg.trainer.steps, rel_throughput=rel))
    return rows, by_mode


def run_ablation(cfg: ExperimentConfig, *, lag: int) -> tuple[
        list[SummaryRow], dict[str, list[RunResult]], bool]:
    """Feature ladder from vanilla async to f-opd; returns (rows, runs, identity).

    ``identity`` reports whether the fully toggled final rung reproduced the
    named f-opd mode step for step, which it must.
    """
    rows = []
    by_rung: dict[str, list[RunResult]] = {}
    for label, toggles in ABLATION_RUNGS:
        trainer_cfg = _fit_capacity(cfg.trainer, mode="async", lag=lag, **toggles)
        results = _train_arm(trainer_cfg, cfg.task, cfg.seeds)
        by_rung[label] = results
        rows.append(build_summary(results, cfg.task.name, lag,
                                  cfg.trainer.steps, mode=label))
    fopd_cfg = _fit_capacity(cfg.trainer, mode="f-opd", lag=lag)
    fopd = _train_arm(fopd_cfg, cfg.task, cfg.seeds)
    by_rung["f-opd"] = fopd
    period = _measured_refresh_period(fopd, cfg.trainer.steps)
    rows.append(build_summary(fopd, cfg.task.name, lag, cfg.trainer.steps,
                              rel_throughput=_rel_throughput(cfg, "f-opd", period)))
    identity = _records_match(by_rung["+adaptive-refresh"], fopd)
    return rows, by_rung, identity


def _records_match(a: Sequence[RunResult], b: Sequence[RunResult]) -> bool:
    """Step-for-step equality of two arms, ignoring the mode label."""
    if len(a) != len(b):
        return False
    for ra, rb in zip(a, b):
        if len(ra.records) != len(rb.records):
            return False
        for rec_a, rec_b in zip(ra.records, rb.records):
            if dataclasses.replace(rec_a, mode="") != dataclasses.replace(rec_b, mode=""):
                return False
    return True


# -- commands -------------------------------------------------------------------


def _emit(out: Path, cfg: ExperimentConfig,
          runs: Sequence[tuple[str, int, RunResult]],
          rows: Sequence[SummaryRow]) -> None:
    write_config_copy(cfg, out)
    write_metrics_jsonl(runs, out / JSONL_NAME)
    write_summary_csv(rows, out / SUMMARY_NAME)
    problems = verify_artifacts(out)
    if problems:
        raise AssertionError("artifact cross-check failed: " + "; ".join(problems))


def cmd_run(args) -> int:
    cfg = with_overrides(load_config(args.config), mode=args.mode,
                         lag=args.lag, n_seeds=args.seeds, out_dir=args.out)
    out = _resolve_out(cfg, args)
    results, row = run_experiment(cfg)
    _emit(out, cfg, [(cfg.trainer.mode, cfg.task.name, cfg.trainer.lag, r)
                     for r in results], [row])
    plots.learning_curves({cfg.trainer.mode: results}, out / "curves.svg",
                          title=cfg.label)
    _print_rows([row])
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_lag_sweep(args) -> int:
    cfg = with_overrides(load_config(args.config), n_seeds=args.seeds,
                         out_dir=args.out)
    out = _resolve_out(cfg, args)
    mode = args.mode or "async"
    sweep = run_lag_sweep(cfg, mode=mode)
    runs = [(mode, family, lag, r)
            for family, by_lag in sweep.items()
            for lag, results in by_lag.items()
            for r in results]
    rows = [build_summary(results, family, lag, cfg.trainer.steps)
            for family, by_lag in sweep.items()
            for lag, results in by_lag.items()]
    _emit(out, cfg, runs, rows)
    plots.lag_sweep_panels(sweep, out)
    _print_rows(rows)
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = with_overrides(load_config(args.config), n_seeds=args.seeds,
                         out_dir=args.out)
    out = _resolve_out(cfg, args)
    rows, by_mode = run_compare(cfg, lag=args.lag)
    runs = [(mode, cfg.task.name, 0 if mode == "sync" else args.lag, r)
            for mode, results in by_mode.items() for r in results]
    _emit(out, cfg, runs, rows)
    plots.learning_curves(by_mode, out / "curves.svg", title=cfg.label)
    plots.summary_bars(rows, out / "final_scores.svg")
    _print_rows(rows)
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = with_overrides(load_config(args.config), n_seeds=args.seeds,
                         out_dir=args.out)
    out = _resolve_out(cfg, args)
    rows, by_rung, identity = run_ablation(cfg, lag=args.lag)
    runs = [(label, cfg.task.name, args.lag, r)
            for label, results in by_rung.items() for r in results]
    _emit(out, cfg, runs, rows)
    plots.summary_bars(rows, out / "ladder.svg", title="ablation ladder")
    _print_rows(rows)
    print("full ladder reproduces f-opd step for step:", "yes" if identity else "NO")
    print(f"artifacts written to {out}")
    return EXIT_OK if identity else EXIT_VERIFY


def cmd_verify(args) -> int:
    report = run_verification(n_instances=args.instances, seed=args.seed,
                              out_dir=args.out)
    print(report.to_table())
    if args.out:
        print(f"report written to {args.out}")
    return EXIT_OK if report.all_passed else EXIT_VERIFY


def cmd_plot(args) -> int:
    src = Path(args.artifacts)
    jsonl = src / JSONL_NAME
    if not jsonl.exists():
        raise ConfigError(f"no {JSONL_NAME} in {src}")
    out = Path(args.out) if args.out else src
    grouped = runs_from_jsonl(jsonl)
    curves = {}
    for (task, mode, lag), results in sorted(grouped.items()):
        label = f"{mode} {task} lag={lag}" if len(grouped) > 1 else mode
        curves[label] = results
    plots.learning_curves(curves, out / "curves.svg")
    lags_per_task: dict[str, set[int]] = {}
    for task, _, lag in grouped:
        lags_per_task.setdefault(task, set()).add(lag)
    if any(len(lags) > 1 for lags in lags_per_task.values()):
        sweep = {}
        for (task, _, lag), results in grouped.items():
            sweep.setdefault(task, {})[lag] = results
        plots.lag_sweep_panels(sweep, out)
    print(f"figures written to {out}")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="freshdistill",
        description="Freshness-aware asynchronous on-policy distillation "
                    "on enumerable tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, *, lag_default=None):
        p.add_argument("--config", required=True, help="experiment file (YAML)")
        p.add_argument("--seeds", type=int, default=None,
                       help="override: use seeds 0..N-1")
        p.add_argument("--out", default=None, help="artifact directory")
        if lag_default is not None:
            p.add_argument("--lag", type=int, default=lag_default,
                           help="forced lag in optimizer steps")

    p = sub.add_parser("run", help="train one configuration")
    add_common(p)
    p.add_argument("--mode", default=None, help="override the trainer mode")
    p.add_argument("--lag", type=int, default=None, help="override the forced lag")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("lag-sweep", help="forced-lag grid on all task families")
    add_common(p)
    p.add_argument("--mode", default=None, help="mode to sweep (default async)")
    p.set_defaults(fn=cmd_lag_sweep)

    p = sub.add_parser("compare", help="all staleness modes at a shared lag")
    add_common(p, lag_default=8)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("ablate", help="incremental feature ladder")
    add_common(p, lag_default=8)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("verify", help="brute-force bound verification")
    p.add_argument("--instances", type=int, default=200,
                   help="number of random instances")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="directory for the report files")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("plot", help="regenerate figures from artifacts")
    p.add_argument("--artifacts", required=True, help="existing artifact directory")
    p.add_argument("--out", default=None, help="figure directory (default: artifacts)")
    p.set_defaults(fn=cmd_plot)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        for line in exc.diagnostics:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
