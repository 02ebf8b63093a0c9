"""Brute-force verification of the staleness bounds on enumerable tasks.

Everything here trades generality for exactness: prefix distributions are
enumerated rather than sampled, objectives are computed as finite sums, and
every inequality the training stack relies on is checked with explicit slack.

  * loss_constants        analytic Lipschitz/supremum constants on the
                          floored simplex, validated against grid search
  * exact_objectives      the synchronous objective, its stale-buffer
                          counterpart, and the relabeled intermediate
  * check_decomposition   |J_sync - J_async| against the drift bound
  * check_lag_budget      policy drift vs the per-step triangle budget
  * check_horizon_compounding  occupancy divergence as horizon grows
  * check_context_perturbation loss gap vs teacher-context divergence
  * run_verification      randomized instance sweep with CSV export and a
                          deliberately crippled bound as a negative control

Objectives follow the trainer's conventions: prefix distributions are taken
at the rollout sampling temperature, while the loss itself compares
temperature-1 floored distributions.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .buffer import Buffer, MissingSnapshotError, SnapshotStore, make_sample
from .categorical import (
    TruncationConfig,
    default_truncation,
    floor_rows,
    kl_rows,
    tv_rows,
)
from .env import (
    CONTEXT_MODES,
    Occupancy,
    StepState,
    TaskSpec,
    build_teacher,
    enumerate_occupancy,
    make_task,
    occupancy_mixture,
    occupancy_tv,
    rollout,
    student_context,
    teacher_context,
)
from .policy import (
    LOSS_KINDS,
    ContextKey,
    PolicyLike,
    PolicyParams,
    PolicySnapshot,
    snapshot,
)
from .validation import check_in_range, check_nonnegative, check_positive_int

# Bound checks tolerate float rounding only; anything past this is a violation.
SLACK_TOL = 1e-9


# -- Lipschitz and supremum constants -----------------------------------------


@dataclass(frozen=True)
class BoundConstants:
    """Constants the drift bounds are evaluated with.

    l_pi and l_q bound the loss change per unit of total variation in the
    student and target argument respectively; l_occ bounds the loss value
    itself. c_roll and c_sup are the composed coefficients in front of the
    rollout-drift and supervision-drift terms. k_h (horizon slope), l_step
    (one-step occupancy sensitivity) and eps_step (per-step drift budgets)
    are optional measurements attached by the checks that estimate them.
    """

    l_pi: float
    l_q: float
    l_occ: float
    c_roll: float
    c_sup: float
    k_h: float | None = None
    l_step: float | None = None
    eps_step: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("l_pi", "l_q", "l_occ", "c_roll", "c_sup"):
            value = getattr(self, name)
            check_nonnegative(value, name)
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
        for name in ("k_h", "l_step"):
            value = getattr(self, name)
            if value is not None:
                check_nonnegative(value, name)
        if self.eps_step is not None:
            for i, e in enumerate(self.eps_step):
                check_nonnegative(e, f"eps_step[{i}]")


def loss_constants(loss_kind: str, trunc: TruncationConfig) -> BoundConstants:
    """Analytic constants for the chosen loss on the floored simplex.

    With floor e and support size k every coordinate lies in
    [e, m] where m = 1 - (k-1)e, so for KL(a || b):

      value     <= (m - e) * ln(m/e)   attained at a, b concentrated on
                                       opposite corners
      first arg  2 * ln(m/e)           gradient range of ln(a_j/b_j), centered
                                       against the zero-sum perturbation
      second arg m/e - e/m             gradient range of a_j/b_j

    The loss reads KL(target || student) for forward-kl and the reverse for
    reverse-kl, so the two gradient constants swap roles between kinds.
    Both bounds scale with 1/e: a zero floor has no finite constants.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if trunc.floor <= 0.0:
        raise ValueError("loss constants diverge at floor 0; use a positive floor")
    if trunc.top_k < 2:
        raise ValueError("top_k 1 admits a single point distribution; no nontrivial constants")
    eps = trunc.floor
    peak = 1.0 - (trunc.top_k - 1) * eps
    l_max = math.log(peak / eps)
    first_arg = 2.0 * l_max
    second_arg = peak / eps - eps / peak
    l_occ = (peak - eps) * l_max
    if loss_kind == "forward-kl":
        l_pi, l_q = second_arg, first_arg
    else:
        l_pi, l_q = first_arg, second_arg
    return BoundConstants(l_pi=l_pi, l_q=l_q, l_occ=l_occ, c_roll=l_occ, c_sup=l_q)


@dataclass(frozen=True)
class GridCheckReport:
    """Grid-search maxima next to the analytic constants they must not exceed."""

    constants: BoundConstants
    student_ratio: float  # max |loss(q, p) - loss(q, p')| / tv(p, p')
    target_ratio: float  # max |loss(q, p) - loss(q', p)| / tv(q, q')
    sup_loss: float
    n_grid: int

    @property
    def passed(self) -> bool:
        return (
            self.student_ratio <= self.constants.l_pi + SLACK_TOL
            and self.target_ratio <= self.constants.l_q + SLACK_TOL
            and self.sup_loss <= self.constants.l_occ + SLACK_TOL
        )


def constants_grid_check(loss_kind: str, floor: float, n_grid: int = 60) -> GridCheckReport:
    """Exhaustive binary-alphabet check that the analytic constants dominate.

    Grids the floored binary simplex, evaluates the loss on every pair, and
    maximizes the observed difference quotients. Binary only: two coordinates
    make total variation a scalar so the full triple product stays cheap.
    """
    check_positive_int(n_grid, "n_grid")
    trunc = TruncationConfig(top_k=2, floor=floor)
    constants = loss_constants(loss_kind, trunc)
    a = np.linspace(floor, 1.0 - floor, n_grid)
    dists = np.stack([a, 1.0 - a], axis=1)
    # loss[i, j] = loss with target dists[i] and student dists[j]
    q = np.repeat(dists, n_grid, axis=0)
    p = np.tile(dists, (n_grid, 1))
    if loss_kind == "forward-kl":
        loss = kl_rows(q, p).reshape(n_grid, n_grid)
    else:
        loss = kl_rows(p, q).reshape(n_grid, n_grid)
    gap = np.abs(a[:, None] - a[None, :])  # tv between binary rows i and j
    off_diag = gap > 0.0
    student_ratio = 0.0
    target_ratio = 0.0
    for i in range(n_grid):
        d_student = np.abs(loss[i][:, None] - loss[i][None, :])
        d_target = np.abs(loss[:, i][:, None] - loss[:, i][None, :])
        student_ratio = max(student_ratio, float((d_student[off_diag] / gap[off_diag]).max()))
        target_ratio = max(target_ratio, float((d_target[off_diag] / gap[off_diag]).max()))
    return GridCheckReport(
        constants=constants,
        student_ratio=student_ratio,
        target_ratio=target_ratio,
        sup_loss=float(loss.max()),
        n_grid=n_grid,
    )


# -- exact objectives ----------------------------------------------------------


class ObjectiveTriple(NamedTuple):
    j_sync: float
    j_async: float
    j_tilde: float


def _policy_step(policy: PolicyLike) -> int:
    step = getattr(policy, "step", None)
    if step is None:
        step = getattr(policy, "step_stamp", None)
    if step is None:
        raise ValueError("policy carries no step counter")
    return int(step)


def _loss_rows(target_rows: np.ndarray, student_rows: np.ndarray, loss_kind: str) -> np.ndarray:
    if loss_kind == "forward-kl":
        return kl_rows(target_rows, student_rows)
    if loss_kind == "reverse-kl":
        return kl_rows(student_rows, target_rows)
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def _depth_occupancies(policy: PolicyLike, task: TaskSpec, trunc: TruncationConfig,
                       temperature: float, budget: int) -> list[Occupancy]:
    """Prefix distributions before each of the task's positions."""
    return [
        enumerate_occupancy(policy, task, d, trunc, temperature=temperature, budget=budget)
        for d in range(task.horizon)
    ]


@dataclass(frozen=True)
class _DepthSlice:
    """One depth of an occupancy with everything the loss needs precomputed."""

    masses: np.ndarray
    student_rows: np.ndarray  # current policy, temperature 1, floored
    prefixes: tuple[tuple[int, ...], ...]


def _slice_occupancies(occs: Sequence[Occupancy], current: PolicyLike, task: TaskSpec,
                       trunc: TruncationConfig) -> list[_DepthSlice]:
    out = []
    for occ in occs:
        prefixes = tuple(occ.probs)
        masses = np.array([occ.probs[k] for k in prefixes])
        ctxs = [student_context(task, pfx) for pfx in prefixes]
        rows = current.probs_for_encoded(current.encode_contexts(ctxs), trunc)
        out.append(_DepthSlice(masses=masses, student_rows=rows, prefixes=prefixes))
    return out


def _teacher_rows(teacher: PolicyLike, task: TaskSpec, prefixes: Sequence[tuple[int, ...]],
                  state: StepState, trunc: TruncationConfig) -> np.ndarray:
    ctxs = [teacher_context(task, pfx, state) for pfx in prefixes]
    return teacher.probs_for_encoded(teacher.encode_contexts(ctxs), trunc)


def _objective_over(slices: Sequence[_DepthSlice], teacher: PolicyLike, task: TaskSpec,
                    state: StepState, trunc: TruncationConfig, loss_kind: str) -> float:
    total = 0.0
    for sl in slices:
        labels = _teacher_rows(teacher, task, sl.prefixes, state, trunc)
        total += float(sl.masses @ _loss_rows(labels, sl.student_rows, loss_kind))
    return total / len(slices)


@dataclass(frozen=True)
class _InstanceEvaluation:
    j_sync: float
    j_async: float
    j_tilde: float
    current_occs: tuple[Occupancy, ...]
    sample_occs: tuple[tuple[Occupancy, ...], ...]
    mean_supervision_tv: float


def _evaluate_instance(task: TaskSpec, current: PolicyLike, buffer: Buffer,
                       teacher: PolicyLike, trunc: TruncationConfig, state: StepState,
                       loss_kind: str, temperature: float, budget: int) -> _InstanceEvaluation:
    if current.window != task.window:
        raise ValueError(
            f"policy window {current.window} != task window {task.window}; "
            "the training objective is undefined"
        )
    samples = buffer.samples
    if not samples:
        raise ValueError("empty buffer has no asynchronous objective")
    store = buffer.store

    cur_occs = _depth_occupancies(current, task, trunc, temperature, budget)
    j_sync = _objective_over(
        _slice_occupancies(cur_occs, current, task, trunc), teacher, task, state, trunc, loss_kind
    )

    j_async_terms = []
    j_tilde_terms = []
    sup_tv_terms = []
    sample_occs = []
    for sample in samples:
        snap = store.get(sample.snapshot_ref)
        occs = _depth_occupancies(snap, task, trunc, temperature, budget)
        sample_occs.append(tuple(occs))
        slices = _slice_occupancies(occs, current, task, trunc)
        label_state = StepState(sample.rollout_step, snap)
        sample_async = 0.0
        sample_tilde = 0.0
        sample_tv = 0.0
        for sl in slices:
            stale_labels = _teacher_rows(teacher, task, sl.prefixes, label_state, trunc)
            fresh_labels = _teacher_rows(teacher, task, sl.prefixes, state, trunc)
            sample_async += float(sl.masses @ _loss_rows(stale_labels, sl.student_rows, loss_kind))
            sample_tilde += float(sl.masses @ _loss_rows(fresh_labels, sl.student_rows, loss_kind))
            sample_tv += float(sl.masses @ tv_rows(fresh_labels, stale_labels))
        h = len(slices)
        j_async_terms.append(sample_async / h)
        j_tilde_terms.append(sample_tilde / h)
        sup_tv_terms.append(sample_tv / h)

    return _InstanceEvaluation(
        j_sync=j_sync,
        j_async=float(np.mean(j_async_terms)),
        j_tilde=float(np.mean(j_tilde_terms)),
        current_occs=tuple(cur_occs),
        sample_occs=tuple(sample_occs),
        mean_supervision_tv=float(np.mean(sup_tv_terms)),
    )


def exact_objectives(task: TaskSpec, current: PolicyLike, buffer: Buffer,
                     teacher: PolicyLike, trunc: TruncationConfig | None = None, *,
                     state: StepState | None = None, loss_kind: str = "forward-kl",
                     temperature: float = 0.7, budget: int = 10 ** 6) -> ObjectiveTriple:
    """Exact values of the three training objectives by full enumeration.

    j_sync averages the current policy's loss over its own prefix
    distribution with labels built at ``state``. j_async replaces the prefix
    distribution with each buffered sample's producing policy and keeps the
    labels that policy's production step would build. j_tilde mixes the two:
    stale prefix distributions, current labels.

    ``state`` defaults to the current policy at its own step counter. Raises
    EnumerationBudgetError when the task's prefix space exceeds ``budget``.
    """
    trunc = trunc or default_truncation(task.vocab_size)
    if state is None:
        state = StepState(_policy_step(current), current)
    ev = _evaluate_instance(task, current, buffer, teacher, trunc, state,
                            loss_kind, temperature, budget)
    return ObjectiveTriple(ev.j_sync, ev.j_async, ev.j_tilde)


def mc_objectives(task: TaskSpec, current: PolicyLike, buffer: Buffer,
                  teacher: PolicyLike, trunc: TruncationConfig | None = None, *,
                  state: StepState | None = None, loss_kind: str = "forward-kl",
                  temperature: float = 0.7, n_samples: int = 2000,
                  rng: np.random.Generator | None = None) -> dict[str, tuple[float, float]]:
    """Monte Carlo estimates of the same three objectives with standard errors.

    The stale objectives stratify evenly over buffered samples, so
    ``n_samples`` must allow at least two rollouts per sample.
    """
    trunc = trunc or default_truncation(task.vocab_size)
    rng = rng if rng is not None else np.random.default_rng(0)
    if state is None:
        state = StepState(_policy_step(current), current)
    samples = buffer.samples
    if not samples:
        raise ValueError("empty buffer has no asynchronous objective")
    per_stratum = n_samples // len(samples)
    if per_stratum < 2:
        raise ValueError(
            f"{n_samples} rollouts over {len(samples)} buffered samples leaves "
            "fewer than two per stratum; increase n_samples"
        )

    def traj_loss(traj, label_state: StepState | None) -> float:
        prefixes = [traj.replay_prefix(h) for h in range(1, len(traj.tokens) + 1)]
        ctxs = [student_context(task, pfx) for pfx in prefixes]
        p = current.probs_for_encoded(current.encode_contexts(ctxs), trunc)
        if label_state is None:
            t_ctxs = list(traj.teacher_contexts)  # contexts recorded at rollout time
        else:
            t_ctxs = [teacher_context(task, pfx, label_state) for pfx in prefixes]
        q = teacher.probs_for_encoded(teacher.encode_contexts(t_ctxs), trunc)
        return float(np.mean(_loss_rows(q, p, loss_kind)))

    sync_vals = np.array([
        traj_loss(rollout(current, task, state, rng, temperature, trunc), None)
        for _ in range(n_samples)
    ])

    async_means, async_vars, tilde_means, tilde_vars = [], [], [], []
    for sample in samples:
        snap = buffer.store.get(sample.snapshot_ref)
        stale_state = StepState(sample.rollout_step, snap)
        a_vals = np.empty(per_stratum)
        t_vals = np.empty(per_stratum)
        for j in range(per_stratum):
            traj = rollout(snap, task, stale_state, rng, temperature, trunc)
            a_vals[j] = traj_loss(traj, None)
            t_vals[j] = traj_loss(traj, state)
        async_means.append(a_vals.mean())
        async_vars.append(a_vals.var(ddof=1))
        tilde_means.append(t_vals.mean())
        tilde_vars.append(t_vals.var(ddof=1))

    b = len(samples)
    return {
        "j_sync": (float(sync_vals.mean()), float(sync_vals.std(ddof=1) / np.sqrt(n_samples))),
        "j_async": (
            float(np.mean(async_means)),
            float(np.sqrt(np.sum(async_vars) / per_stratum) / b),
        ),
        "j_tilde": (
            float(np.mean(tilde_means)),
            float(np.sqrt(np.sum(tilde_vars) / per_stratum) / b),
        ),
    }


# -- discrepancy decomposition --------------------------------------------------


@dataclass(frozen=True)
class DiscrepancyReport:
    """Exact objective gap next to the drift bound that must dominate it.

    The bound splits into a prefix-distribution term (how far the stale
    mixture drifted from the current policy's own distribution) and a label
    term (how far the teacher's answers moved between label-time and current
    contexts). ``mean_sample_tv`` is the per-sample average distance whose
    convexity refinement must dominate ``mixture_tv``.
    """

    j_sync: float
    j_async: float
    j_tilde: float
    delta: float
    mixture_tv: float
    mean_supervision_tv: float
    roll_term: float
    sup_term: float
    bound: float
    slack: float
    mean_sample_tv: float
    convexity_slack: float

    @property
    def passed(self) -> bool:
        return self.slack >= -SLACK_TOL and self.convexity_slack >= -SLACK_TOL


def check_decomposition(task: TaskSpec, current: PolicyLike, buffer: Buffer,
                        teacher: PolicyLike, constants: BoundConstants | None = None,
                        trunc: TruncationConfig | None = None, *,
                        state: StepState | None = None, loss_kind: str = "forward-kl",
                        temperature: float = 0.7, budget: int = 10 ** 6) -> DiscrepancyReport:
    """Evaluate the objective gap and the two-term drift bound exactly.

    The gap |j_sync - j_async| must not exceed
    c_roll * TV(current mixture, stale mixture) + c_sup * mean label TV,
    and the mixture distance must not exceed the mean per-sample distance.
    """
    trunc = trunc or default_truncation(task.vocab_size)
    constants = constants or loss_constants(loss_kind, trunc)
    if state is None:
        state = StepState(_policy_step(current), current)
    ev = _evaluate_instance(task, current, buffer, teacher, trunc, state,
                            loss_kind, temperature, budget)

    current_mixture = occupancy_mixture(ev.current_occs)
    stale_mixture = occupancy_mixture(
        [occ for occs in ev.sample_occs for occ in occs]
    )
    mixture_tv = occupancy_tv(current_mixture, stale_mixture)
    sample_tvs = [
        occupancy_tv(current_mixture, occupancy_mixture(occs)) for occs in ev.sample_occs
    ]
    mean_sample_tv = float(np.mean(sample_tvs))

    delta = abs(ev.j_sync - ev.j_async)
    roll_term = constants.c_roll * mixture_tv
    sup_term = constants.c_sup * ev.mean_supervision_tv
    bound = roll_term + sup_term
    return DiscrepancyReport(
        j_sync=ev.j_sync,
        j_async=ev.j_async,
        j_tilde=ev.j_tilde,
        delta=delta,
        mixture_tv=mixture_tv,
        mean_supervision_tv=ev.mean_supervision_tv,
        roll_term=roll_term,
        sup_term=sup_term,
        bound=bound,
        slack=bound - delta,
        mean_sample_tv=mean_sample_tv,
        convexity_slack=mean_sample_tv - mixture_tv,
    )


# -- per-step drift budget -------------------------------------------------------


@dataclass(frozen=True)
class LagBudgetReport:
    """End-to-end policy drift against the summed per-step drifts."""

    lhs: np.ndarray  # TV(newest, oldest) per context
    rhs: np.ndarray  # sum of adjacent-step TVs per context
    lag: int
    max_violation: float
    tightness: float | None  # max lhs/rhs where the budget is nonzero

    @property
    def passed(self) -> bool:
        return self.max_violation <= SLACK_TOL


def check_lag_budget(history: Sequence[PolicyLike], contexts: Sequence[ContextKey],
                     trunc: TruncationConfig | None = None,
                     temperature: float = 1.0) -> LagBudgetReport:
    """Triangle budget for policy drift accumulated across optimizer steps.

    ``history`` must hold one policy per step, oldest first, with consecutive
    step counters; a gap means a snapshot was dropped and the per-step sum on
    the right-hand side would silently undercount.
    """
    if not history:
        raise ValueError("empty policy history")
    if not contexts:
        raise ValueError("no contexts to evaluate drift at")
    if any(p is None for p in history):
        raise MissingSnapshotError("policy history contains a missing snapshot")
    steps = [_policy_step(p) for p in history]
    expected = list(range(steps[0], steps[0] + len(steps)))
    if steps != expected:
        raise MissingSnapshotError(
            f"policy history steps {steps} are not consecutive; "
            "every intermediate snapshot is required"
        )
    first = history[0]
    for p in history[1:]:
        if p.window != first.window or p.vocab_size != first.vocab_size:
            raise ValueError("policies in the history disagree on window or alphabet")
    trunc = trunc or default_truncation(first.vocab_size)

    enc = first.encode_contexts(list(contexts))
    dists = [p.probs_for_encoded(enc, trunc, temperature=temperature) for p in history]
    lhs = tv_rows(dists[-1], dists[0])
    rhs = np.zeros_like(lhs)
    for newer, older in zip(dists[1:], dists[:-1]):
        rhs += tv_rows(newer, older)
    nonzero = rhs > 1e-12
    tightness = float((lhs[nonzero] / rhs[nonzero]).max()) if nonzero.any() else None
    return LagBudgetReport(
        lhs=lhs,
        rhs=rhs,
        lag=steps[-1] - steps[0],
        max_violation=float((lhs - rhs).max()),
        tightness=tightness,
    )


# -- horizon compounding ----------------------------------------------------------


@dataclass(frozen=True)
class CompoundingReport:
    """How a fixed per-step policy perturbation compounds over the horizon."""

    delta: float
    horizons: tuple[int, ...]
    tvs: tuple[float, ...]
    fitted_slope: float  # least-squares slope of tv against horizon * delta
    envelope_slope: float  # max tv / (horizon * delta); 0 when delta is 0
    monotone_ok: bool
    linear_bound_ok: bool  # tv <= horizon * delta at every horizon

    @property
    def passed(self) -> bool:
        return self.monotone_ok and self.linear_bound_ok


def check_horizon_compounding(delta: float, horizons: Sequence[int] = (1, 2, 4, 8),
                              vocab_size: int = 2, window: int = 1,
                              trunc: TruncationConfig | None = None,
                              budget: int = 10 ** 6, seed: int = 0) -> CompoundingReport:
    """Measure full-path divergence between a policy and a per-step perturbation.

    Both policies emit the same distribution at every prefix, differing by
    exactly ``delta`` in total variation, so each horizon isolates how
    one-step drift accumulates. Enumeration is exact at every horizon; the
    linear budget tv <= horizon * delta and monotonicity in the horizon are
    asserted, and the fitted slope is reported for calibration.
    """
    check_positive_int(vocab_size, "vocab_size")
    horizons = tuple(sorted(set(int(h) for h in horizons)))
    if not horizons or horizons[0] < 1:
        raise ValueError("horizons must be positive integers")
    trunc = trunc or default_truncation(vocab_size)
    headroom = 1.0 / vocab_size - trunc.floor
    check_in_range(delta, 0.0, headroom, "delta")

    base_row = np.full(vocab_size, 1.0 / vocab_size)
    pert_row = base_row.copy()
    pert_row[0] -= delta
    pert_row[1] += delta

    tvs = []
    prompt = (0,) * (window + 1)
    for h in horizons:
        task = make_task(
            "tool-analog", seed=seed, vocab_size=vocab_size, horizon=h, window=window,
            context_mode="static", observation_positions=(),
            prompts=(prompt,), eval_prompts=(prompt,),
        )
        base = PolicyParams(kind="tabular", vocab_size=vocab_size, window=window)
        pert = PolicyParams(kind="tabular", vocab_size=vocab_size, window=window)
        base.weights[:] = np.log(base_row)
        pert.weights[:] = np.log(pert_row)
        # temperature 1 keeps the emitted rows exactly base_row / pert_row
        occ_base = enumerate_occupancy(base, task, h, trunc, temperature=1.0, budget=budget)
        occ_pert = enumerate_occupancy(pert, task, h, trunc, temperature=1.0, budget=budget)
        tvs.append(occupancy_tv(occ_base, occ_pert))

    tvs_arr = np.array(tvs)
    h_arr = np.array(horizons, dtype=np.float64)
    if delta > 0.0:
        x = h_arr * delta
        fitted = float((tvs_arr @ x) / (x @ x))
        envelope = float((tvs_arr / x).max())
    else:
        fitted = 0.0
        envelope = 0.0
    monotone_ok = bool(np.all(np.diff(tvs_arr) >= -SLACK_TOL))
    linear_bound_ok = bool(np.all(tvs_arr <= h_arr * delta + SLACK_TOL))
    return CompoundingReport(
        delta=delta,
        horizons=horizons,
        tvs=tuple(float(t) for t in tvs),
        fitted_slope=fitted,
        envelope_slope=envelope,
        monotone_ok=monotone_ok,
        linear_bound_ok=linear_bound_ok,
    )


# -- context perturbation ----------------------------------------------------------


@dataclass(frozen=True)
class PerturbationReport:
    """Loss gap from swapping the teacher context, with both dominating bounds."""

    gap: float
    tv: float
    kl: float
    tv_bound: float
    pinsker_bound: float

    @property
    def passed(self) -> bool:
        return (
            self.gap <= self.tv_bound + SLACK_TOL
            and self.tv_bound <= self.pinsker_bound + SLACK_TOL
        )


def check_context_perturbation(teacher: PolicyLike, ctx_current: ContextKey,
                               ctx_label: ContextKey, student_dist,
                               constants: BoundConstants | None = None,
                               trunc: TruncationConfig | None = None,
                               loss_kind: str = "forward-kl") -> PerturbationReport:
    """Bound the loss change caused by evaluating the teacher at a drifted context.

    The gap |loss(q_current, p) - loss(q_label, p)| must stay below
    l_q * tv(q_current, q_label), which in turn sits below the KL-based
    bound l_q * sqrt(kl/2).
    """
    trunc = trunc or default_truncation(teacher.vocab_size)
    constants = constants or loss_constants(loss_kind, trunc)
    rows = teacher.probs_for_encoded(
        teacher.encode_contexts([ctx_current, ctx_label]), trunc
    )
    q_cur, q_lab = rows[0], rows[1]
    p = floor_rows(np.asarray(student_dist, dtype=np.float64)[None, :], trunc)[0]
    loss_cur = float(_loss_rows(rows[0:1], p[None, :], loss_kind)[0])
    loss_lab = float(_loss_rows(rows[1:2], p[None, :], loss_kind)[0])
    gap = abs(loss_cur - loss_lab)
    tv = float(tv_rows(q_cur[None, :], q_lab[None, :])[0])
    kl = float(kl_rows(q_cur[None, :], q_lab[None, :])[0])
    return PerturbationReport(
        gap=gap,
        tv=tv,
        kl=kl,
        tv_bound=constants.l_q * tv,
        pinsker_bound=constants.l_q * math.sqrt(max(kl, 0.0) / 2.0),
    )


@dataclass(frozen=True)
class PerturbationSweep:
    """Worst cases over randomized context pairs and student distributions."""

    n_trials: int
    max_gap: float
    min_gap_slack: float  # min(tv_bound - gap)
    min_pinsker_slack: float  # min(pinsker_bound - tv_bound)
    n_violations: int

    @property
    def passed(self) -> bool:
        return self.n_violations == 0


def perturbation_sweep(task: TaskSpec, teacher: PolicyLike,
                       constants: BoundConstants | None = None,
                       n_trials: int = 10 ** 4, rng: np.random.Generator | None = None,
                       trunc: TruncationConfig | None = None,
                       loss_kind: str = "forward-kl") -> PerturbationSweep:
    """Randomized sweep of the context-perturbation bounds over teacher rows.

    Context pairs share their auxiliary arity (as real label drift does) and
    student distributions are drawn from the flat Dirichlet, floored.
    """
    check_positive_int(n_trials, "n_trials")
    trunc = trunc or default_truncation(task.vocab_size)
    constants = constants or loss_constants(loss_kind, trunc)
    rng = rng if rng is not None else np.random.default_rng(0)
    v = task.vocab_size
    tw = task.teacher_window

    windows = rng.integers(0, v, size=(2, n_trials, tw))
    has_aux = rng.integers(0, 2, size=n_trials).astype(bool)
    aux = rng.integers(0, v, size=(2, n_trials))
    ctxs_cur = [
        ContextKey(tuple(int(s) for s in windows[0, i]),
                   (int(aux[0, i]),) if has_aux[i] else ())
        for i in range(n_trials)
    ]
    ctxs_lab = [
        ContextKey(tuple(int(s) for s in windows[1, i]),
                   (int(aux[1, i]),) if has_aux[i] else ())
        for i in range(n_trials)
    ]
    q_cur = teacher.probs_for_encoded(teacher.encode_contexts(ctxs_cur), trunc)
    q_lab = teacher.probs_for_encoded(teacher.encode_contexts(ctxs_lab), trunc)
    p = floor_rows(rng.dirichlet(np.ones(v), size=n_trials), trunc)

    gaps = np.abs(_loss_rows(q_cur, p, loss_kind) - _loss_rows(q_lab, p, loss_kind))
    tvs = tv_rows(q_cur, q_lab)
    kls = np.maximum(kl_rows(q_cur, q_lab), 0.0)
    tv_bounds = constants.l_q * tvs
    pinsker_bounds = constants.l_q * np.sqrt(kls / 2.0)
    gap_slack = tv_bounds - gaps
    pinsker_slack = pinsker_bounds - tv_bounds
    n_violations = int((gap_slack < -SLACK_TOL).sum() + (pinsker_slack < -SLACK_TOL).sum())
    return PerturbationSweep(
        n_trials=n_trials,
        max_gap=float(gaps.max()),
        min_gap_slack=float(gap_slack.min()),
        min_pinsker_slack=float(pinsker_slack.min()),
        n_violations=n_violations,
    )


# -- randomized instances ------------------------------------------------------------


@dataclass
class OracleInstance:
    """A small enumerable training snapshot: task, trained policy, stale buffer."""

    label: str
    task: TaskSpec
    current: PolicyParams
    state: StepState
    buffer: Buffer
    teacher: PolicySnapshot
    trunc: TruncationConfig
    history: tuple[PolicySnapshot, ...]  # one snapshot per optimizer step


def random_instance(instance_id: int, seed: int = 0,
                    context_mode: str | None = None) -> OracleInstance:
    """Deterministically generate a small instance with random staleness.

    The same (instance_id, seed) pair always rebuilds the same instance, so a
    failing row in a verification report is replayable.
    """
    rng = np.random.default_rng((seed, instance_id))
    v = int(rng.integers(2, 5))
    horizon = int(rng.integers(1, 4))
    window = int(rng.integers(1, 3))
    mode = context_mode or CONTEXT_MODES[int(rng.integers(len(CONTEXT_MODES)))]
    obs = (1,) if horizon >= 2 and rng.random() < 0.5 else ()
    task = make_task(
        "tool-analog", seed=int(rng.integers(10 ** 6)), vocab_size=v, horizon=horizon,
        window=window, context_mode=mode, observation_positions=obs,
        n_prompts=int(rng.integers(1, 4)), n_eval_prompts=1,
        drift_period=int(rng.integers(1, 3)),
    )
    teacher = build_teacher(task)
    trunc = default_truncation(v)

    current = PolicyParams(kind="tabular", vocab_size=v, window=window)
    current.weights[:] = rng.normal(0.0, 0.3, size=current.weights.shape)
    history = [snapshot(current)]
    n_steps = int(rng.integers(1, 6))
    for _ in range(n_steps):
        grad = rng.normal(0.0, 0.2, size=current.weights.shape)
        current.weights -= 0.5 * grad
        current.step_stamp += 1
        history.append(snapshot(current))

    store = SnapshotStore()
    buffer = Buffer(capacity=16, store=store)
    n_samples = int(rng.integers(1, 9))
    for sid in range(n_samples):
        r = int(rng.integers(0, n_steps + 1))
        snap = history[r]
        traj = rollout(snap, task, StepState(r, snap), rng, temperature=0.7,
                       trunc=trunc, episode_id=sid)
        buffer.insert(make_sample(traj, task, teacher, snap, store, trunc, sample_id=sid))

    return OracleInstance(
        label=f"inst-{seed}-{instance_id}",
        task=task,
        current=current,
        state=StepState(n_steps, current),
        buffer=buffer,
        teacher=teacher,
        trunc=trunc,
        history=tuple(history),
    )


def negative_control_instance(seed: int = 0) -> OracleInstance:
    """An instance whose objective gap is carried entirely by label drift.

    The policy's weights never change between production and consumption, so
    the prefix-distribution term is exactly zero, while the step-coupled
    contexts advance every step and move the teacher's answers. A bound
    evaluated with the label coefficient forced to zero must fail here; a
    verification run that cannot detect that failure is itself broken.
    """
    rng = np.random.default_rng((seed, 2 ** 20))
    v = 3
    task = make_task(
        "tool-analog", seed=7, vocab_size=v, horizon=2, window=1,
        context_mode="step-coupled", observation_positions=(), drift_period=1,
        n_prompts=2, n_eval_prompts=1,
    )
    teacher = build_teacher(task)
    trunc = default_truncation(v)
    current = PolicyParams(kind="tabular", vocab_size=v, window=1)
    current.weights[:] = rng.normal(0.0, 0.3, size=current.weights.shape)
    snap0 = snapshot(current)

    store = SnapshotStore()
    buffer = Buffer(capacity=8, store=store)
    for sid in range(3):
        traj = rollout(snap0, task, StepState(0, snap0), rng, temperature=0.7,
                       trunc=trunc, episode_id=sid)
        buffer.insert(make_sample(traj, task, teacher, snap0, store, trunc, sample_id=sid))

    current.step_stamp = 1  # step advances, weights do not
    return OracleInstance(
        label=f"control-{seed}",
        task=task,
        current=current,
        state=StepState(1, current),
        buffer=buffer,
        teacher=teacher,
        trunc=trunc,
        history=(snap0, snapshot(current)),
    )


# -- verification harness --------------------------------------------------------------


@dataclass(frozen=True)
class VerificationRow:
    instance: str
    check: str
    lhs: float
    rhs: float
    slack: float
    passed: bool


@dataclass(frozen=True)
class VerificationReport:
    rows: tuple[VerificationRow, ...]
    negative_control_detected: bool

    @property
    def n_failed(self) -> int:
        return sum(1 for r in self.rows if not r.passed)

    @property
    def all_passed(self) -> bool:
        return self.n_failed == 0

    @property
    def failures(self) -> tuple[VerificationRow, ...]:
        return tuple(r for r in self.rows if not r.passed)

    def to_table(self) -> str:
        header = f"{'instance':<16} {'check':<28} {'lhs':>12} {'rhs':>12} {'slack':>12}  pass"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(
                f"{r.instance:<16} {r.check:<28} {r.lhs:>12.6g} {r.rhs:>12.6g} "
                f"{r.slack:>12.3g}  {'ok' if r.passed else 'FAIL'}"
            )
        lines.append(
            f"{len(self.rows)} checks, {self.n_failed} failed, "
            f"negative control {'detected' if self.negative_control_detected else 'MISSED'}"
        )
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["instance", "check", "lhs", "rhs", "slack", "pass"])
            for r in self.rows:
                writer.writerow(
                    [r.instance, r.check, repr(r.lhs), repr(r.rhs), repr(r.slack),
                     "ok" if r.passed else "fail"]
                )


def _all_student_contexts(task: TaskSpec) -> list[ContextKey]:
    return [
        ContextKey(w) for w in itertools.product(range(task.vocab_size), repeat=task.window)
    ]


def run_verification(n_instances: int = 200, seed: int = 0, *,
                     loss_kind: str = "forward-kl", temperature: float = 0.7,
                     delta: float = 0.02, horizons: Sequence[int] = (1, 2, 4, 8),
                     n_perturbation_trials: int = 10 ** 4,
                     out_dir=None) -> VerificationReport:
    """Sweep every bound over randomized instances and write the evidence.

    Emits one row per checked inequality: the decomposition bound and its
    convexity refinement per instance, the per-step drift budget per
    instance, the horizon-compounding budgets, the context-perturbation
    sweep, the constants grid check, and finally a negative control whose
    deliberately crippled bound must be caught as a violation. When
    ``out_dir`` is given the full table lands in verification.csv.
    """
    check_positive_int(n_instances, "n_instances")
    rows: list[VerificationRow] = []

    for i in range(n_instances):
        inst = random_instance(i, seed)
        report = check_decomposition(
            inst.task, inst.current, inst.buffer, inst.teacher, trunc=inst.trunc,
            state=inst.state, loss_kind=loss_kind, temperature=temperature,
        )
        rows.append(VerificationRow(
            instance=inst.label, check="decomposition",
            lhs=report.delta, rhs=report.bound, slack=report.slack,
            passed=report.slack >= -SLACK_TOL,
        ))
        rows.append(VerificationRow(
            instance=inst.label, check="mixture-convexity",
            lhs=report.mixture_tv, rhs=report.mean_sample_tv,
            slack=report.convexity_slack,
            passed=report.convexity_slack >= -SLACK_TOL,
        ))
        budget_report = check_lag_budget(
            inst.history, _all_student_contexts(inst.task), inst.trunc
        )
        worst = int(np.argmax(budget_report.lhs - budget_report.rhs))
        rows.append(VerificationRow(
            instance=inst.label, check="step-drift-budget",
            lhs=float(budget_report.lhs[worst]), rhs=float(budget_report.rhs[worst]),
            slack=-budget_report.max_violation, passed=budget_report.passed,
        ))

    comp = check_horizon_compounding(delta, horizons)
    for h, tv in zip(comp.horizons, comp.tvs):
        rows.append(VerificationRow(
            instance="compounding", check=f"linear-budget-h{h}",
            lhs=tv, rhs=h * delta, slack=h * delta - tv,
            passed=tv <= h * delta + SLACK_TOL,
        ))
    drops = -np.diff(np.array(comp.tvs)) if len(comp.tvs) > 1 else np.array([0.0])
    rows.append(VerificationRow(
        instance="compounding", check="monotone-in-horizon",
        lhs=float(drops.max()), rhs=0.0, slack=-float(drops.max()),
        passed=comp.monotone_ok,
    ))

    sweep_task = make_task("tool-analog", seed=seed, vocab_size=4, horizon=2, window=1,
                           context_mode="step-coupled", observation_positions=())
    sweep = perturbation_sweep(
        sweep_task, build_teacher(sweep_task), n_trials=n_perturbation_trials,
        rng=np.random.default_rng((seed, 777)), loss_kind=loss_kind,
    )
    rows.append(VerificationRow(
        instance="perturbation", check="loss-gap-vs-tv",
        lhs=sweep.max_gap, rhs=sweep.max_gap + sweep.min_gap_slack,
        slack=sweep.min_gap_slack, passed=sweep.min_gap_slack >= -SLACK_TOL,
    ))
    rows.append(VerificationRow(
        instance="perturbation", check="tv-vs-pinsker",
        lhs=0.0, rhs=0.0, slack=sweep.min_pinsker_slack,
        passed=sweep.min_pinsker_slack >= -SLACK_TOL,
    ))

    grid = constants_grid_check(loss_kind, floor=0.1)
    rows.append(VerificationRow(
        instance="constants", check="grid-student-lipschitz",
        lhs=grid.student_ratio, rhs=grid.constants.l_pi,
        slack=grid.constants.l_pi - grid.student_ratio,
        passed=grid.student_ratio <= grid.constants.l_pi + SLACK_TOL,
    ))
    rows.append(VerificationRow(
        instance="constants", check="grid-target-lipschitz",
        lhs=grid.target_ratio, rhs=grid.constants.l_q,
        slack=grid.constants.l_q - grid.target_ratio,
        passed=grid.target_ratio <= grid.constants.l_q + SLACK_TOL,
    ))
    rows.append(VerificationRow(
        instance="constants", check="grid-sup-loss",
        lhs=grid.sup_loss, rhs=grid.constants.l_occ,
        slack=grid.constants.l_occ - grid.sup_loss,
        passed=grid.sup_loss <= grid.constants.l_occ + SLACK_TOL,
    ))

    control = negative_control_instance(seed)
    crippled = replace(loss_constants(loss_kind, control.trunc), c_sup=0.0)
    control_report = check_decomposition(
        control.task, control.current, control.buffer, control.teacher, crippled,
        trunc=control.trunc, state=control.state, loss_kind=loss_kind,
        temperature=temperature,
    )
    detected = control_report.slack < -SLACK_TOL
    rows.append(VerificationRow(
        instance=control.label, check="negative-control",
        lhs=control_report.delta, rhs=control_report.bound,
        slack=control_report.slack, passed=detected,
    ))

    report = VerificationReport(rows=tuple(rows), negative_control_detected=detected)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "verification.csv")
        (out / "verification.txt").write_text(report.to_table() + "\n")
    return report
