"""Replay-based drift diagnostics and the per-sample freshness gate.

Two divergences are measured for every buffered sample. Rollout drift asks
how far the current policy has moved from the producing snapshot on the
sample's own replay prefixes. Supervision drift asks how far the teacher's
answer has moved because the conditioning context changed since label time.
Both are mean KLs over the sample's aligned positions, current distribution
first, on the truncated support.

They combine into a freshness score

    f = (lag + 1)^-1 * exp(-(alpha * sqrt(D_roll) + beta * sqrt(D_sup)))

whose exponent is the drift surrogate used for ranking. The score feeds a
ReLU gate: samples below the threshold get weight zero and drop out of the
objective entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .buffer import Buffer, BufferedSample, MissingSnapshotError, SnapshotStore, compute_alignment
from .categorical import TruncationConfig, kl_rows
from .env import StepState, TaskSpec
from .policy import PolicyLike
from .validation import check_in_range, check_nonnegative

# KL values this far below zero are float rounding on nearly identical rows,
# not a contract violation.
_KL_ROUNDING_TOL = 1e-12


@dataclass(frozen=True)
class FreshnessConfig:
    """Surrogate weights and the gate threshold."""

    alpha: float = 1.0
    beta: float = 1.0
    xi: float = 0.05

    def __post_init__(self):
        check_nonnegative(self.alpha, "alpha")
        check_nonnegative(self.beta, "beta")
        check_in_range(self.xi, 0.0, 1.0, "xi", hi_open=True)


@dataclass(frozen=True)
class FreshnessReport:
    """Everything the gate and the refresh rule need to know about a sample."""

    lag: int
    d_roll: float
    d_sup: float
    surrogate: float
    score: float
    m_roll: float
    m_sup: float
    valid: bool

    def __post_init__(self):
        if self.lag < 0:
            raise ValueError(f"lag must be >= 0, got {self.lag}")
        if not self.valid and self.score != 0.0:
            raise ValueError("invalid reports carry score 0")
        check_in_range(self.score, 0.0, 1.0, "score")
        check_in_range(self.m_roll, 0.0, 1.0, "m_roll")
        check_in_range(self.m_sup, 0.0, 1.0, "m_sup")

    def to_json(self) -> dict:
        return {
            "lag": self.lag, "d_roll": self.d_roll, "d_sup": self.d_sup,
            "surrogate": self.surrogate, "score": self.score,
            "m_roll": self.m_roll, "m_sup": self.m_sup, "valid": self.valid,
        }

    @classmethod
    def from_json(cls, d: dict) -> "FreshnessReport":
        return cls(**d)


def invalid_report(lag: int) -> FreshnessReport:
    return FreshnessReport(lag=lag, d_roll=0.0, d_sup=0.0, surrogate=0.0,
                           score=0.0, m_roll=0.0, m_sup=0.0, valid=False)


def rollout_drift(sample: BufferedSample, current_policy: PolicyLike,
                  store: SnapshotStore, trunc: TruncationConfig) -> float:
    """Mean KL(current policy vs producing snapshot) over replay prefixes."""
    if not store.has(sample.snapshot_ref):
        raise MissingSnapshotError(f"snapshot {sample.snapshot_ref} not resident")
    if not sample.u_roll:
        raise ValueError("empty replay alignment set; mark the sample invalid")
    idx = np.asarray(sample.u_roll) - 1
    cur = current_policy.probs_for_encoded(sample.student_enc[idx], trunc)
    return float(kl_rows(cur, sample.stale_student_dists[idx]).mean())


def _current_aux(task: TaskSpec, state: StepState, student_enc: np.ndarray) -> np.ndarray | None:
    """Aux symbols the current state would attach; None in static mode."""
    if task.context_mode == "static":
        return None
    if task.context_mode == "step-coupled":
        a = (state.step // task.drift_period) % task.vocab_size
        return np.full(len(student_enc), a, dtype=np.int64)
    if state.student is None:
        raise ValueError("policy-coupled context needs the current student in StepState")
    return state.student.logits_for_encoded(student_enc).argmax(axis=1)


def supervision_drift(sample: BufferedSample, teacher: PolicyLike, task: TaskSpec,
                      state: StepState, trunc: TruncationConfig) -> float:
    """Mean KL(teacher under current contexts vs its cached label-time answers).

    Only the current side is evaluated; the label-time side was cached at
    insert. Static contexts reuse the stored encodings unchanged, so the
    drift is exactly zero there.
    """
    if not sample.u_sup:
        raise ValueError("empty supervision alignment set; mark the sample invalid")
    idx = np.asarray(sample.u_sup) - 1
    enc = sample.teacher_enc[idx]
    aux = _current_aux(task, state, sample.student_enc[idx])
    if aux is not None:
        enc = teacher.set_aux_slot(enc, aux)
    cur = teacher.probs_for_encoded(enc, trunc)
    return float(kl_rows(cur, sample.teacher_label_dists[idx]).mean())


def _checked_drift(value: float, name: str) -> float:
    if value < -_KL_ROUNDING_TOL or not math.isfinite(value):
        raise ValueError(f"{name} must be >= 0, got {value!r}")
    return max(value, 0.0)


def drift_surrogate(d_roll: float, d_sup: float, cfg: FreshnessConfig) -> float:
    d_roll = _checked_drift(d_roll, "d_roll")
    d_sup = _checked_drift(d_sup, "d_sup")
    return cfg.alpha * math.sqrt(d_roll) + cfg.beta * math.sqrt(d_sup)


def freshness_score(lag: int, d_roll: float, d_sup: float, cfg: FreshnessConfig) -> float:
    """f = (lag+1)^-1 * exp(-surrogate); with alpha = beta = 0 this is the
    pure age-based score 1/(lag+1)."""
    if lag < 0:
        raise ValueError(f"lag must be >= 0, got {lag}")
    return math.exp(-drift_surrogate(d_roll, d_sup, cfg)) / (lag + 1)


def gate(score: float, xi: float) -> float:
    """ReLU gate weight: max(0, f - xi)."""
    check_in_range(score, 0.0, 1.0, "score")
    return max(0.0, score - xi)


def build_report(sample: BufferedSample, current_policy: PolicyLike, teacher: PolicyLike,
                 task: TaskSpec, state: StepState, cfg: FreshnessConfig,
                 store: SnapshotStore, trunc: TruncationConfig) -> FreshnessReport:
    """Compose alignment, drifts, and score; errors collapse to an invalid report.

    Writes the report and the alignment sets back onto the sample.
    """
    lag = state.step - sample.rollout_step
    if lag < 0:
        raise ValueError(f"sample from step {sample.rollout_step} is newer than step {state.step}")
    sample.u_roll, sample.u_sup = compute_alignment(sample, task, current_policy, store)
    report = None
    if sample.valid and sample.u_roll and sample.u_sup:
        try:
            d_roll = _checked_drift(rollout_drift(sample, current_policy, store, trunc), "d_roll")
            d_sup = _checked_drift(supervision_drift(sample, teacher, task, state, trunc), "d_sup")
            h = sample.token_length
            report = FreshnessReport(
                lag=lag,
                d_roll=d_roll,
                d_sup=d_sup,
                surrogate=drift_surrogate(d_roll, d_sup, cfg),
                score=freshness_score(lag, d_roll, d_sup, cfg),
                m_roll=len(sample.u_roll) / h,
                m_sup=len(sample.u_sup) / h,
                valid=True,
            )
        except (MissingSnapshotError, ValueError):
            report = None
    if report is None:
        sample.valid = False
        report = invalid_report(lag)
    sample.report = report
    return report


def refresh_reports(buffer: Buffer, current_policy: PolicyLike, teacher: PolicyLike,
                    task: TaskSpec, state: StepState, cfg: FreshnessConfig,
                    trunc: TruncationConfig) -> None:
    """Recompute every resident sample's report in one vectorized pass.

    Bit-identical to calling build_report per sample; the stacked evaluation
    just amortizes the policy and teacher forward passes.
    """
    samples = buffer.samples
    if not samples:
        return
    store = buffer.store
    live: list[BufferedSample] = []
    for s in samples:
        lag = state.step - s.rollout_step
        if lag < 0:
            raise ValueError(f"sample from step {s.rollout_step} is newer than step {state.step}")
        s.u_roll, s.u_sup = compute_alignment(s, task, current_policy, store)
        if s.valid and s.u_roll and s.u_sup:
            live.append(s)
        else:
            s.valid = False
            s.report = invalid_report(lag)
    if not live:
        return
    lengths = [s.token_length for s in live]
    bounds = np.concatenate([[0], np.cumsum(lengths)])
    student_enc = np.concatenate([s.student_enc for s in live])
    stale = np.concatenate([s.stale_student_dists for s in live])
    labels = np.concatenate([s.teacher_label_dists for s in live])
    teacher_enc = np.concatenate([s.teacher_enc for s in live])

    cur_student = current_policy.probs_for_encoded(student_enc, trunc)
    kl_roll = kl_rows(cur_student, stale)
    aux = _current_aux(task, state, student_enc)
    enc_cur = teacher_enc if aux is None else teacher.set_aux_slot(teacher_enc, aux)
    cur_teacher = teacher.probs_for_encoded(enc_cur, trunc)
    kl_sup = kl_rows(cur_teacher, labels)

    current_arity = 0 if task.context_mode == "static" else 1
    for i, s in enumerate(live):
        lo, hi = bounds[i], bounds[i + 1]
        h = s.token_length
        d_roll = float(kl_roll[lo:hi].mean())
        sup_mask = s.stored_aux_arity == current_arity
        d_sup = float(kl_sup[lo:hi][sup_mask].mean())
        lag = state.step - s.rollout_step
        try:
            s.report = FreshnessReport(
                lag=lag,
                d_roll=_checked_drift(d_roll, "d_roll"),
                d_sup=_checked_drift(d_sup, "d_sup"),
                surrogate=drift_surrogate(d_roll, d_sup, cfg),
                score=freshness_score(lag, d_roll, d_sup, cfg),
                m_roll=len(s.u_roll) / h,
                m_sup=len(s.u_sup) / h,
                valid=True,
            )
        except ValueError:
            s.valid = False
            s.report = invalid_report(lag)
