"""Training loop with five staleness-handling modes.

All modes share one gradient engine and differ only in where the targets come
from and how minibatches are weighted:

  sync               rollouts consumed the step they are produced, targets
                     relabeled under current contexts
  async              rollouts delayed by the pipeline lag, targets frozen at
                     label time (the defining staleness of the baseline)
  async+hard-refresh async plus an unconditional buffer refresh on a fixed
                     schedule
  async+lag-only     delayed rollouts, relabeled targets, and gate weights
                     from sample age alone
  f-opd              delayed rollouts, relabeled targets, drift-aware gate
                     weights, rollout-anchored regularization, and adaptive
                     buffer refresh

The forced lag k is realized by a FIFO batch queue: k+1 batches are produced
up front, one batch is produced after every optimizer step, and the oldest is
consumed each step, so after a k-step warmup every consumed batch is exactly
k steps old. Refreshing discards the queue and refills it at the current
parameters.

Weighted objective per minibatch M:

    J = (1/|M|) * sum_i w_i * (loss_i + lambda * D_roll_i)

with w_i the ReLU-gated freshness weight. Gated-out samples stay in the
denominator; weights are treated as constants (no gradient flows through the
gate). The anchor term penalizes divergence from the producing snapshot and
its gradient flows through the current-policy side only.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .buffer import (
    Buffer,
    BufferedSample,
    RefreshPolicy,
    aggregates,
    make_sample,
    refresh,
    should_refresh,
)
from .categorical import default_truncation, entropy_rows, floor_rows, kl_rows
from .env import StepState, TaskSpec, build_teacher, evaluation_score, rollout
from .freshness import (
    FreshnessConfig,
    _current_aux,
    build_report,
    gate,
    refresh_reports,
)
from .policy import (
    LOSS_KINDS,
    PolicyParams,
    accumulate_logit_gradient,
    apply_update,
    snapshot,
)
from .validation import check_in_range, check_nonnegative, check_positive_int

MODES = ("sync", "async", "async+hard-refresh", "async+lag-only", "f-opd")


def weighted_objective(weights: np.ndarray, losses: np.ndarray,
                       anchors: np.ndarray, anchor_weight: float) -> float:
    """Gate-weighted minibatch objective.

    Gated-out samples keep their slot in the denominator, so down-weighting a
    sample never up-weights the rest.
    """
    weights = np.asarray(weights, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    if not (weights.shape == losses.shape == anchors.shape):
        raise ValueError("weights, losses, and anchors must align")
    if weights.size == 0:
        raise ValueError("empty minibatch")
    return float(np.mean(weights * (losses + anchor_weight * anchors)))


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the aborting step record."""

    def __init__(self, message: str, record: "StepRecord"):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainerConfig:
    mode: str
    loss_kind: str = "forward-kl"
    anchor_weight: float = 0.5
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    steps: int = 400
    lag: int = 0
    temperature: float = 0.7
    eval_every: int = 10
    seed: int = 0
    use_weighting: bool | None = None
    use_anchor: bool | None = None
    use_adaptive_refresh: bool | None = None
    use_relabel: bool | None = None
    lag_only_score: bool | None = None
    hard_refresh_every: int = 10
    buffer_capacity: int = 256
    freshness: FreshnessConfig = field(default_factory=FreshnessConfig)
    refresh_policy: RefreshPolicy = field(default_factory=RefreshPolicy)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        check_nonnegative(self.anchor_weight, "anchor_weight")
        check_nonnegative(self.learning_rate, "learning_rate")
        check_in_range(self.momentum, 0.0, 1.0, "momentum", hi_open=True)
        check_nonnegative(self.temperature, "temperature")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.steps, "steps")
        check_positive_int(self.eval_every, "eval_every")
        check_positive_int(self.hard_refresh_every, "hard_refresh_every")
        check_positive_int(self.buffer_capacity, "buffer_capacity")
        if self.lag < 0:
            raise ValueError("lag must be >= 0")
        if self.mode == "sync" and self.lag > 0:
            raise ValueError("sync mode forbids a nonzero lag")
        need = (self.lag + 1) * self.batch_size
        if self.buffer_capacity < need:
            raise ValueError(
                f"buffer_capacity {self.buffer_capacity} cannot hold the "
                f"lag-{self.lag} queue; need at least {need}"
            )

    # mode-implied switches; explicit values win for ablations
    _MODE_DEFAULTS = {
        "sync": dict(use_weighting=False, use_anchor=False,
                     use_adaptive_refresh=False, use_relabel=True, lag_only_score=False),
        "async": dict(use_weighting=False, use_anchor=False,
                      use_adaptive_refresh=False, use_relabel=False, lag_only_score=False),
        "async+hard-refresh": dict(use_weighting=False, use_anchor=False,
                                   use_adaptive_refresh=False, use_relabel=False,
                                   lag_only_score=False),
        "async+lag-only": dict(use_weighting=True, use_anchor=False,
                               use_adaptive_refresh=False, use_relabel=True,
                               lag_only_score=True),
        "f-opd": dict(use_weighting=True, use_anchor=True,
                      use_adaptive_refresh=True, use_relabel=True, lag_only_score=False),
    }

    def resolved(self) -> "TrainerConfig":
        """Fill unset toggles with the mode's defaults."""
        updates = {}
        for name, default in self._MODE_DEFAULTS[self.mode].items():
            if getattr(self, name) is None:
                updates[name] = default
        return dataclasses.replace(self, **updates) if updates else self


@dataclass(frozen=True)
class StepRecord:
    step: int
    mode: str
    loss: float
    anchor: float
    mean_gate: float
    refresh_fired: bool
    entropy: float
    mean_d_roll: float = 0.0
    mean_d_sup: float = 0.0
    eval_score: float | None = None
    warning: str | None = None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class RunResult:
    mode: str
    seed: int
    records: tuple[StepRecord, ...]
    evals: tuple[tuple[int, float], ...]  # (step, score)
    final_score: float
    peak_score: float
    refresh_count: int

    @property
    def eval_scores(self) -> list[float]:
        return [s for _, s in self.evals]


ReportSink = Callable[[int, Sequence[BufferedSample]], None]


class Trainer:
    """One seed's training run; deterministic given (config, task, seed)."""

    def __init__(self, cfg: TrainerConfig, task: TaskSpec, seed: int | None = None,
                 report_sink: ReportSink | None = None):
        self.cfg = cfg.resolved()
        self.task = task
        self.seed = cfg.seed if seed is None else seed
        self.rng = np.random.default_rng(self.seed)
        self.teacher = build_teacher(task)
        self.trunc = default_truncation(task.vocab_size)
        self.params = PolicyParams(kind="tabular", vocab_size=task.vocab_size,
                                   window=task.window)
        self.report_sink = report_sink
        self.buffer = Buffer(capacity=self.cfg.buffer_capacity)
        self.refresh_count = 0
        self._last_refresh_step = 0
        self._next_sample_id = 0
        self._hard_schedule = self.cfg.mode == "async+hard-refresh"
        if self.cfg.lag_only_score:
            fr = self.cfg.freshness
            self._score_cfg = FreshnessConfig(alpha=0.0, beta=0.0, xi=fr.xi)
        else:
            self._score_cfg = self.cfg.freshness
        for _ in range(self.cfg.lag + 1):
            for s in self._produce_batch():
                self.buffer.insert(s)

    # -- production --------------------------------------------------------

    def _produce_batch(self) -> list[BufferedSample]:
        snap = snapshot(self.params)
        state = StepState(self.params.step_stamp, self.params)
        batch = []
        for _ in range(self.cfg.batch_size):
            traj = rollout(snap, self.task, state, self.rng,
                           temperature=self.cfg.temperature,
                           episode_id=self._next_sample_id)
            batch.append(make_sample(traj, self.task, self.teacher, snap,
                                     self.buffer.store, self.trunc,
                                     sample_id=self._next_sample_id))
            self._next_sample_id += 1
        return batch

    def _refresh_buffer(self, step: int) -> None:
        batches = self.cfg.lag + 1
        refresh(self.buffer,
                lambda count: [s for _ in range(batches) for s in self._produce_batch()],
                batches * self.cfg.batch_size)
        self.refresh_count += 1
        self._last_refresh_step = step

    # -- objective ---------------------------------------------------------

    def _minibatch_pass(self, batch: list[BufferedSample], state: StepState,
                        weights: np.ndarray) -> tuple[float, float, np.ndarray, float]:
        """Objective value, anchor value, logit gradient, and mean entropy."""
        cfg = self.cfg
        h = self.task.horizon
        m = len(batch)
        enc_s = np.concatenate([s.student_enc for s in batch])
        stale = np.concatenate([s.stale_student_dists for s in batch])
        p_raw = self.params.probs_for_encoded(enc_s)
        p_floor = floor_rows(p_raw, self.trunc)

        if cfg.use_relabel:
            teacher_enc = np.concatenate([s.teacher_enc for s in batch])
            aux = _current_aux(self.task, state, enc_s)
            if aux is not None:
                teacher_enc = self.teacher.set_aux_slot(teacher_enc, aux)
            targets = self.teacher.probs_for_encoded(teacher_enc, self.trunc)
        else:
            targets = np.concatenate([s.teacher_label_dists for s in batch])

        if cfg.loss_kind == "forward-kl":
            loss_rows = kl_rows(targets, p_floor)
            grad_rows = p_raw - targets
        else:
            loss_rows = kl_rows(p_floor, targets)
            r = np.log(p_raw / targets)
            grad_rows = p_raw * (r - (p_raw * r).sum(axis=1, keepdims=True))

        loss_i = loss_rows.reshape(m, h).mean(axis=1)
        per_pos_w = np.repeat(weights / (m * h), h)[:, None]
        grad_rows = grad_rows * per_pos_w

        anchor_value = 0.0
        anchor_i = np.zeros(m)
        if cfg.use_anchor:
            anchor_i = kl_rows(p_floor, stale).reshape(m, h).mean(axis=1)
            ra = np.log(p_raw / stale)
            anchor_rows = p_raw * (ra - (p_raw * ra).sum(axis=1, keepdims=True))
            grad_rows = grad_rows + anchor_rows * (cfg.anchor_weight * per_pos_w)
            anchor_value = float(np.mean(weights * cfg.anchor_weight * anchor_i))

        objective = weighted_objective(weights, loss_i, anchor_i, cfg.anchor_weight)
        gradient = np.zeros_like(self.params.weights)
        accumulate_logit_gradient(self.params, enc_s, grad_rows, gradient)
        mean_entropy = float(entropy_rows(p_floor).mean())
        return objective, anchor_value, gradient, mean_entropy

    # -- steps ---------------------------------------------------------------

    def step(self, t: int) -> StepRecord:
        cfg = self.cfg
        state = StepState(t, self.params)
        refresh_fired = False
        warning = None

        if cfg.use_adaptive_refresh and len(self.buffer):
            refresh_reports(self.buffer, self.params, self.teacher, self.task,
                            state, self._score_cfg, self.trunc)
            aggs = aggregates(self.buffer)
            if should_refresh(aggs, cfg.refresh_policy, t - self._last_refresh_step):
                self._refresh_buffer(t)
                refresh_reports(self.buffer, self.params, self.teacher, self.task,
                                state, self._score_cfg, self.trunc)
                refresh_fired = True

        if not cfg.use_adaptive_refresh:
            # score the batch about to be consumed while its snapshot is
            # still resident; the adaptive path scored the whole buffer above.
            # Scoring is unconditional so every mode reports drift diagnostics.
            for s in self.buffer.samples[:cfg.batch_size]:
                build_report(s, self.params, self.teacher, self.task, state,
                             self._score_cfg, self.buffer.store, self.trunc)

        batch = self.buffer.consume(cfg.batch_size)
        scored = [s.report for s in batch if s.report is not None and s.report.valid]
        mean_d_roll = float(np.mean([r.d_roll for r in scored])) if scored else 0.0
        mean_d_sup = float(np.mean([r.d_sup for r in scored])) if scored else 0.0

        if cfg.use_weighting:
            weights = np.array([
                gate(s.report.score, self._score_cfg.xi) if s.valid else 0.0
                for s in batch
            ])
            if not weights.any():
                warning = "all samples gated out"
        else:
            weights = np.ones(len(batch))
        if self.report_sink is not None:
            self.report_sink(t, batch)

        loss, anchor, gradient, mean_entropy = self._minibatch_pass(batch, state, weights)
        if not math.isfinite(loss):
            record = StepRecord(step=t, mode=cfg.mode, loss=loss, anchor=anchor,
                                mean_gate=float(weights.mean()), refresh_fired=refresh_fired,
                                entropy=mean_entropy, mean_d_roll=mean_d_roll,
                                mean_d_sup=mean_d_sup, warning="non-finite loss")
            raise DivergenceError(f"non-finite loss at step {t}", record)
        apply_update(self.params, gradient, cfg.learning_rate, cfg.momentum)
        self.params.step_stamp += 1

        eval_score = None
        if (t + 1) % cfg.eval_every == 0 or t == cfg.steps - 1:
            eval_score = evaluation_score(self.params, self.task, self.trunc)

        if self._hard_schedule and (t + 1) % cfg.hard_refresh_every == 0:
            self._refresh_buffer(t)
            refresh_fired = True
        elif t < cfg.steps - 1:
            for s in self._produce_batch():
                self.buffer.insert(s)

        return StepRecord(step=t, mode=cfg.mode, loss=loss, anchor=anchor,
                          mean_gate=float(weights.mean()), refresh_fired=refresh_fired,
                          entropy=mean_entropy, mean_d_roll=mean_d_roll,
                          mean_d_sup=mean_d_sup, eval_score=eval_score, warning=warning)

    def run(self) -> RunResult:
        records = []
        evals = []
        for t in range(self.cfg.steps):
            record = self.step(t)
            records.append(record)
            if record.eval_score is not None:
                evals.append((t, record.eval_score))
        scores = [s for _, s in evals]
        return RunResult(
            mode=self.cfg.mode,
            seed=self.seed,
            records=tuple(records),
            evals=tuple(evals),
            final_score=scores[-1],
            peak_score=max(scores),
            refresh_count=self.refresh_count,
        )


def run(cfg: TrainerConfig, task: TaskSpec, seeds: Sequence[int],
        report_sink: ReportSink | None = None) -> list[RunResult]:
    """Train one run per seed with otherwise identical configuration."""
    return [Trainer(cfg, task, seed=seed, report_sink=report_sink).run() for seed in seeds]


def summarize_scores(results: Sequence[RunResult]) -> tuple[list[float], list[float]]:
    """Per-checkpoint mean and standard deviation across seeds."""
    traces = np.array([r.eval_scores for r in results])
    return traces.mean(axis=0).tolist(), traces.std(axis=0).tolist()
