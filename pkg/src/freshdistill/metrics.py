"""Run artifacts: step-level JSONL, per-mode summary rows, and their cross-check.

The JSONL file is the ground truth: one line per optimizer step, carrying the
full step record plus the run identity (task, seed, forced lag). Lines are
emitted with sorted keys and compact separators, so the same experiment writes
byte-identical files on every rerun. The summary CSV is derived data; a
recompute from the JSONL must match it to within float-printing tolerance,
and ``verify_artifacts`` checks exactly that.

A run is flagged as collapsed when its final score is more than 40% below its
peak and it stayed below 90% of the peak for the last 10% of steps.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .trainer import RunResult

JSONL_NAME = "metrics.jsonl"
SUMMARY_NAME = "summary.csv"


# -- step-level JSONL ---------------------------------------------------------


def record_lines(result: RunResult, task: str, lag: int,
                 arm: str | None = None) -> list[str]:
    """One compact JSON line per step, with the run identity on every line.

    ``arm`` names the experiment arm; it defaults to the trainer mode but
    differs from it when several arms share a mode (ablation rungs).
    """
    lines = []
    for record in result.records:
        row = {"arm": result.mode if arm is None else arm,
               "task": task, "seed": result.seed, "lag": lag}
        row.update(record.to_json())
        lines.append(json.dumps(row, sort_keys=True, separators=(",", ":")))
    return lines


def write_metrics_jsonl(results_by_run: Iterable[tuple[str, str, int, RunResult]],
                        path: str | Path) -> Path:
    """Write all runs' step records; yields of (arm, task, lag, run)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for arm, task, lag, result in results_by_run:
            for line in record_lines(result, task, lag, arm):
                fh.write(line + "\n")
    return path


def read_metrics_jsonl(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def runs_from_jsonl(path: str | Path) -> dict[tuple[str, str, int], list[RunResult]]:
    """Rebuild run results from the step log, keyed by (task, arm, lag).

    The JSONL carries everything a run result holds, so artifacts can be
    re-plotted and re-summarized without rerunning training. The rebuilt
    result's mode field carries the arm label.
    """
    from .trainer import StepRecord

    grouped = _group_runs(read_metrics_jsonl(path))
    out: dict[tuple[str, str, int], list[RunResult]] = {}
    for (arm, task, lag), by_seed in grouped.items():
        runs = []
        for seed in sorted(by_seed):
            rows = by_seed[seed]
            records = tuple(
                StepRecord(**{k: v for k, v in row.items()
                              if k not in ("arm", "task", "seed", "lag")})
                for row in rows)
            evals = tuple((r.step, r.eval_score) for r in records
                          if r.eval_score is not None)
            scores = [s for _, s in evals]
            runs.append(RunResult(
                mode=arm, seed=seed, records=records, evals=evals,
                final_score=scores[-1], peak_score=max(scores),
                refresh_count=sum(r.refresh_fired for r in records)))
        out[(task, arm, lag)] = runs
    return out


# -- collapse rule ------------------------------------------------------------


def is_collapsed(evals: Sequence[tuple[int, float]], steps: int) -> bool:
    """Final more than 40% below peak, and under 90% of peak for the last 10% of steps."""
    if not evals:
        raise ValueError("no evaluation scores to classify")
    scores = [s for _, s in evals]
    peak = max(scores)
    final = scores[-1]
    if peak <= 0.0:
        return False
    tail_start = steps - max(1, steps // 10)
    tail = [s for t, s in evals if t >= tail_start]
    if not tail:
        tail = [final]
    return final < 0.6 * peak and all(s < 0.9 * peak for s in tail)


# -- summaries ----------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    """One experiment arm: score statistics, stability, and cost across seeds."""

    mode: str
    task: str
    lag: int
    n_seeds: int
    final_mean: float
    final_std: float
    peak_mean: float
    peak_final_drop: float
    collapse_count: int
    mean_d_roll: float
    mean_d_sup: float
    rel_throughput: float | None = None

    @property
    def collapse_ratio(self) -> str:
        return f"{self.collapse_count}/{self.n_seeds}"


def build_summary(results: Sequence[RunResult], task: str, lag: int, steps: int,
                  *, rel_throughput: float | None = None,
                  mode: str | None = None) -> SummaryRow:
    """Aggregate one arm's runs into a summary row."""
    if not results:
        raise ValueError("no runs to summarize")
    finals = np.array([r.final_score for r in results])
    peaks = np.array([r.peak_score for r in results])
    d_rolls = [np.mean([rec.mean_d_roll for rec in r.records]) for r in results]
    d_sups = [np.mean([rec.mean_d_sup for rec in r.records]) for r in results]
    return SummaryRow(
        mode=results[0].mode if mode is None else mode,
        task=task,
        lag=lag,
        n_seeds=len(results),
        final_mean=float(finals.mean()),
        final_std=float(finals.std()),
        peak_mean=float(peaks.mean()),
        peak_final_drop=float((peaks - finals).mean()),
        collapse_count=sum(is_collapsed(r.evals, steps) for r in results),
        mean_d_roll=float(np.mean(d_rolls)),
        mean_d_sup=float(np.mean(d_sups)),
        rel_throughput=rel_throughput,
    )


_CSV_HEADER = ["mode", "task", "lag", "n_seeds", "final_mean", "final_std",
               "peak_mean", "peak_final_drop", "collapse", "mean_d_roll",
               "mean_d_sup", "rel_throughput"]


def write_summary_csv(rows: Sequence[SummaryRow], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for row in rows:
            writer.writerow([
                row.mode, row.task, row.lag, row.n_seeds,
                repr(row.final_mean), repr(row.final_std),
                repr(row.peak_mean), repr(row.peak_final_drop),
                row.collapse_ratio, repr(row.mean_d_roll),
                repr(row.mean_d_sup),
                "" if row.rel_throughput is None else repr(row.rel_throughput),
            ])
    return path


def read_summary_csv(path: str | Path) -> list[SummaryRow]:
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != _CSV_HEADER:
            raise ValueError(f"unexpected summary header: {reader.fieldnames}")
        for raw in reader:
            collapse_count, n_seeds = raw["collapse"].split("/")
            rows.append(SummaryRow(
                mode=raw["mode"],
                task=raw["task"],
                lag=int(raw["lag"]),
                n_seeds=int(n_seeds),
                final_mean=float(raw["final_mean"]),
                final_std=float(raw["final_std"]),
                peak_mean=float(raw["peak_mean"]),
                peak_final_drop=float(raw["peak_final_drop"]),
                collapse_count=int(collapse_count),
                mean_d_roll=float(raw["mean_d_roll"]),
                mean_d_sup=float(raw["mean_d_sup"]),
                rel_throughput=(None if raw["rel_throughput"] == ""
                                else float(raw["rel_throughput"])),
            ))
    return rows


# -- JSONL -> summary recompute ----------------------------------------------


def _group_runs(lines: Sequence[dict]) -> dict[tuple[str, str, int], dict[int, list[dict]]]:
    """(arm, task, lag) -> seed -> step rows, preserving step order."""
    grouped: dict[tuple[str, str, int], dict[int, list[dict]]] = {}
    for row in lines:
        key = (row["arm"], row["task"], row["lag"])
        grouped.setdefault(key, {}).setdefault(row["seed"], []).append(row)
    return grouped


def summaries_from_jsonl(path: str | Path) -> list[SummaryRow]:
    """Recompute every summary row (throughput excluded) from the raw lines."""
    grouped = _group_runs(read_metrics_jsonl(path))
    rows = []
    for (arm, task, lag), by_seed in grouped.items():
        finals, peaks, collapses, d_rolls, d_sups = [], [], [], [], []
        for records in by_seed.values():
            steps = len(records)
            evals = [(r["step"], r["eval_score"]) for r in records
                     if r["eval_score"] is not None]
            scores = [s for _, s in evals]
            finals.append(scores[-1])
            peaks.append(max(scores))
            collapses.append(is_collapsed(evals, steps))
            d_rolls.append(float(np.mean([r["mean_d_roll"] for r in records])))
            d_sups.append(float(np.mean([r["mean_d_sup"] for r in records])))
        finals_arr = np.array(finals)
        peaks_arr = np.array(peaks)
        rows.append(SummaryRow(
            mode=arm, task=task, lag=lag, n_seeds=len(by_seed),
            final_mean=float(finals_arr.mean()),
            final_std=float(finals_arr.std()),
            peak_mean=float(peaks_arr.mean()),
            peak_final_drop=float((peaks_arr - finals_arr).mean()),
            collapse_count=sum(collapses),
            mean_d_roll=float(np.mean(d_rolls)),
            mean_d_sup=float(np.mean(d_sups)),
        ))
    return rows


def verify_artifacts(out_dir: str | Path, tol: float = 1e-9) -> list[str]:
    """Cross-check the emitted CSV against a recompute from the JSONL.

    Returns a list of mismatch descriptions; empty means the artifacts agree.
    Throughput comes from the pipeline simulator, not the step records, so it
    is exempt from the recompute.
    """
    out = Path(out_dir)
    emitted = {(r.mode, r.task, r.lag): r for r in read_summary_csv(out / SUMMARY_NAME)}
    recomputed = {(r.mode, r.task, r.lag): r
                  for r in summaries_from_jsonl(out / JSONL_NAME)}
    problems = []
    if set(emitted) != set(recomputed):
        problems.append(f"row keys differ: csv {sorted(set(emitted))} "
                        f"vs jsonl {sorted(set(recomputed))}")
        return problems
    numeric = ["final_mean", "final_std", "peak_mean", "peak_final_drop",
               "mean_d_roll", "mean_d_sup"]
    for key, row in emitted.items():
        other = recomputed[key]
        for name in numeric:
            a, b = getattr(row, name), getattr(other, name)
            if not math.isclose(a, b, rel_tol=0.0, abs_tol=tol):
                problems.append(f"{key} {name}: csv {a!r} vs recompute {b!r}")
        if (row.collapse_count, row.n_seeds) != (other.collapse_count, other.n_seeds):
            problems.append(f"{key} collapse: csv {row.collapse_ratio} "
                            f"vs recompute {other.collapse_ratio}")
    return problems
