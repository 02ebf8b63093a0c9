"""SVG figures for runs, lag sweeps, and mode comparisons.

Output is byte-deterministic: the SVG id hash salt is pinned, text is kept as
text rather than rendered to paths, and the creation-date metadata is dropped.
Rerunning the same experiment rewrites identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib import pyplot as plt

from .metrics import SummaryRow
from .trainer import RunResult

_RC = {
    "svg.hashsalt": "freshdistill",
    "svg.fonttype": "none",
    "figure.constrained_layout.use": True,
}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _mean_std_traces(results: Sequence[RunResult]) -> tuple[list[int], np.ndarray, np.ndarray]:
    steps = [t for t, _ in results[0].evals]
    traces = np.array([r.eval_scores for r in results])
    return steps, traces.mean(axis=0), traces.std(axis=0)


def learning_curves(curves: Mapping[str, Sequence[RunResult]],
                    path: str | Path, *, title: str = "evaluation score") -> Path:
    """Mean curve with a one-standard-deviation band per labeled arm."""
    if not curves:
        raise ValueError("no curves to plot")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for label, results in curves.items():
            steps, mean, std = _mean_std_traces(results)
            line, = ax.plot(steps, mean, label=label)
            ax.fill_between(steps, mean - std, mean + std,
                            color=line.get_color(), alpha=0.2, linewidth=0)
        ax.set_xlabel("step")
        ax.set_ylabel("evaluation score")
        ax.set_title(title)
        ax.legend(loc="lower right", fontsize=8)
        return _save(fig, path)


def lag_sweep_panels(sweep: Mapping[str, Mapping[int, Sequence[RunResult]]],
                     out_dir: str | Path) -> list[Path]:
    """Three panels: final score vs lag, mean drifts vs lag, entropy vs step.

    ``sweep`` maps task family -> forced lag -> runs. The entropy panel uses
    the largest lag, where drift effects are most visible.
    """
    if not sweep:
        raise ValueError("no sweep data to plot")
    out = Path(out_dir)
    paths = []

    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 4))
        for family, by_lag in sweep.items():
            lags = sorted(by_lag)
            finals = [np.mean([r.final_score for r in by_lag[k]]) for k in lags]
            stds = [np.std([r.final_score for r in by_lag[k]]) for k in lags]
            ax.errorbar(lags, finals, yerr=stds, marker="o", capsize=3, label=family)
        ax.set_xlabel("forced lag (steps)")
        ax.set_ylabel("final evaluation score")
        ax.set_title("score vs lag")
        ax.legend(fontsize=8)
        paths.append(_save(fig, out / "score_vs_lag.svg"))

        fig, ax = plt.subplots(figsize=(6, 4))
        for family, by_lag in sweep.items():
            lags = sorted(by_lag)
            rolls, sups = [], []
            for k in lags:
                runs = by_lag[k]
                rolls.append(np.mean([[rec.mean_d_roll for rec in r.records]
                                      for r in runs]))
                sups.append(np.mean([[rec.mean_d_sup for rec in r.records]
                                     for r in runs]))
            line, = ax.plot(lags, rolls, marker="o", label=f"{family} rollout")
            ax.plot(lags, sups, marker="s", linestyle="--",
                    color=line.get_color(), label=f"{family} supervision")
        ax.set_xlabel("forced lag (steps)")
        ax.set_ylabel("mean drift (KL)")
        ax.set_title("drift diagnostics vs lag")
        ax.legend(fontsize=7)
        paths.append(_save(fig, out / "drift_vs_lag.svg"))

        fig, ax = plt.subplots(figsize=(6, 4))
        for family, by_lag in sweep.items():
            worst = max(by_lag)
            runs = by_lag[worst]
            steps = [rec.step for rec in runs[0].records]
            entropy = np.mean([[rec.entropy for rec in r.records] for r in runs], axis=0)
            ax.plot(steps, entropy, label=f"{family} (lag {worst})")
        ax.set_xlabel("step")
        ax.set_ylabel("mean policy entropy (nats)")
        ax.set_title("entropy vs step at the largest lag")
        ax.legend(fontsize=8)
        paths.append(_save(fig, out / "entropy_vs_step.svg"))

    return paths


def summary_bars(rows: Sequence[SummaryRow], path: str | Path,
                 *, title: str = "final score by mode") -> Path:
    """Final score per arm with a standard-deviation whisker."""
    if not rows:
        raise ValueError("no summary rows to plot")
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7, 4))
        labels = [r.mode for r in rows]
        means = [r.final_mean for r in rows]
        stds = [r.final_std for r in rows]
        x = np.arange(len(rows))
        ax.bar(x, means, yerr=stds, capsize=4)
        ax.set_xticks(x)
        ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
        ax.set_ylabel("final evaluation score")
        ax.set_title(title)
        return _save(fig, path)
