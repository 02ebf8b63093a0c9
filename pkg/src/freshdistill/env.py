"""Synthetic sequence tasks with a drifting teacher-context channel.

A task fixes a token alphabet, an episode horizon, a deterministic
observation rule that appends symbols to the history after designated token
positions, and a target pattern: the unique correct continuation at every
context, defined over the teacher's (one symbol wider) window. The teacher is
a frozen tabular policy that places most of its mass on the target token and,
in coupled context modes, is tilted toward the auxiliary conditioning symbol.
That tilt is what makes cached labels genuinely stale once the auxiliary
symbol has moved on.

Context construction rules:
  static          teacher conditions on the prefix alone
  policy-coupled  prefix plus the current student's argmax continuation
  step-coupled    prefix plus a symbol that advances every drift_period steps

Exact prefix-occupancy enumeration is provided for small instances; beyond
the budget callers are directed to the Monte Carlo estimator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .categorical import TruncationConfig, default_truncation
from .policy import (
    ContextKey,
    PolicyLike,
    PolicySnapshot,
    sample_token,
    window_from_history,
)
from .validation import check_in_range, check_positive_int

FAMILIES = ("single-step", "tool-analog", "long-horizon")
CONTEXT_MODES = ("static", "policy-coupled", "step-coupled")


@dataclass(frozen=True)
class TaskSpec:
    """Immutable task definition; see module docstring for semantics."""

    name: str
    family: str
    vocab_size: int
    horizon: int
    window: int  # student context width; the teacher sees one more symbol
    context_mode: str
    observation_positions: tuple[int, ...]
    obs_coeffs: tuple[int, ...]
    obs_offset: int
    target_table: np.ndarray  # target token per teacher-window index
    prompts: tuple[tuple[int, ...], ...]
    eval_prompts: tuple[tuple[int, ...], ...]
    teacher_mass: float = 0.92  # base probability on the target token
    teacher_tilt: float = 0.3  # mixing weight toward the aux symbol
    drift_period: int = 4  # step-coupled aux advances every this many steps
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.context_mode not in CONTEXT_MODES:
            raise ValueError(f"unknown context mode {self.context_mode!r}")
        check_positive_int(self.vocab_size, "vocab_size")
        check_positive_int(self.horizon, "horizon")
        check_positive_int(self.drift_period, "drift_period")
        check_in_range(self.teacher_mass, 0.0, 1.0, "teacher_mass", lo_open=True, hi_open=True)
        check_in_range(self.teacher_tilt, 0.0, 1.0, "teacher_tilt", hi_open=True)
        if self.family == "single-step":
            if self.horizon > 4 or self.observation_positions:
                raise ValueError("single-step family: horizon <= 4 and no observations")
        if self.family == "long-horizon":
            if self.horizon < 16:
                raise ValueError("long-horizon family: horizon >= 16")
            missing = set(range(1, self.horizon)) - set(self.observation_positions)
            if missing:
                raise ValueError("long-horizon family: observation after every step")
        for p in self.observation_positions:
            if not 1 <= p < self.horizon:
                raise ValueError(f"observation position {p} outside [1, horizon)")
        table = np.asarray(self.target_table, dtype=np.int64)
        expected = (self.vocab_size + 1) ** self.teacher_window
        if table.shape != (expected,):
            raise ValueError(f"target_table shape {table.shape} != ({expected},)")
        if table.min() < 0 or table.max() >= self.vocab_size:
            raise ValueError("target_table entries outside token alphabet")
        table.setflags(write=False)
        object.__setattr__(self, "target_table", table)
        if len(self.obs_coeffs) != self.teacher_window:
            raise ValueError("obs_coeffs length must equal the teacher window")
        for prompt in self.prompts + self.eval_prompts:
            if len(prompt) < self.teacher_window:
                raise ValueError("prompts must cover the teacher window")
            for s in prompt:
                if not 0 <= s < self.vocab_size:
                    raise ValueError("prompt symbol outside token alphabet")

    @property
    def teacher_window(self) -> int:
        return self.window + 1

    def window_index(self, window: Sequence[int]) -> int:
        base = self.vocab_size + 1
        idx = 0
        for s in window:
            idx = idx * base + int(s)
        return idx

    def target_at(self, history: Sequence[int]) -> int:
        w = window_from_history(history, self.teacher_window, self.vocab_size)
        return int(self.target_table[self.window_index(w)])

    def observation(self, history: Sequence[int]) -> int:
        """Deterministic observation symbol appended after designated positions."""
        w = window_from_history(history, self.teacher_window, self.vocab_size)
        acc = self.obs_offset
        for c, s in zip(self.obs_coeffs, w):
            acc += c * s
        return acc % self.vocab_size


@dataclass(frozen=True)
class StepState:
    """What 'now' means for context construction: optimizer step + student."""

    step: int
    student: PolicyLike | None = None


@dataclass(frozen=True)
class Trajectory:
    prompt: tuple[int, ...]
    tokens: tuple[int, ...]
    history: tuple[int, ...]  # prompt + tokens with observations interleaved
    prefix_lens: tuple[int, ...]  # history length before each token position
    observations: tuple[tuple[int, int], ...]  # (token position, symbol)
    teacher_contexts: tuple[ContextKey, ...]  # label-time contexts
    rollout_step: int
    episode_id: int = 0
    seed: int | None = None

    def __post_init__(self):
        if len(self.tokens) != len(self.teacher_contexts):
            raise ValueError("one teacher context per token position")

    def replay_prefix(self, h: int) -> tuple[int, ...]:
        """The history the policy saw before emitting token h (1-indexed)."""
        return self.history[: self.prefix_lens[h - 1]]


def student_context(task: TaskSpec, history: Sequence[int]) -> ContextKey:
    return ContextKey(window_from_history(history, task.window, task.vocab_size))


def _own_context(policy: PolicyLike, task: TaskSpec, history: Sequence[int]) -> ContextKey:
    """Context at the policy's own window width, aux left absent."""
    return ContextKey(window_from_history(history, policy.window, task.vocab_size))


def teacher_context(task: TaskSpec, history: Sequence[int], state: StepState) -> ContextKey:
    """Teacher conditioning context for the prefix ``history`` under ``state``."""
    window = window_from_history(history, task.teacher_window, task.vocab_size)
    if task.context_mode == "static":
        return ContextKey(window)
    if task.context_mode == "step-coupled":
        return ContextKey(window, ((state.step // task.drift_period) % task.vocab_size,))
    # policy-coupled: the student's current argmax continuation at this prefix
    if state.student is None:
        raise ValueError("policy-coupled context needs the current student in StepState")
    enc = state.student.encode_contexts([student_context(task, history)])
    argmax = int(np.argmax(state.student.logits_for_encoded(enc)[0]))
    return ContextKey(window, (argmax,))


def trajectory_teacher_context(task: TaskSpec, traj: Trajectory, h: int,
                               state: StepState) -> ContextKey:
    """Rebuild the teacher context at position h of a stored trajectory."""
    if not 1 <= h <= len(traj.tokens):
        raise ValueError(f"position {h} outside trajectory of length {len(traj.tokens)}")
    return teacher_context(task, traj.replay_prefix(h), state)


def _advance(task: TaskSpec, history: list[int], position: int, token: int) -> int | None:
    """Append a sampled token (and any observation due after it) to history."""
    history.append(token)
    if position in task.observation_positions:
        obs = task.observation(history)
        history.append(obs)
        return obs
    return None


def rollout(snapshot: PolicyLike, task: TaskSpec, state: StepState,
            rng: np.random.Generator, temperature: float = 0.7,
            trunc: TruncationConfig | None = None, episode_id: int = 0,
            prompt: tuple[int, ...] | None = None) -> Trajectory:
    """Sample one episode; label-time teacher contexts are recorded per position."""
    trunc = trunc or default_truncation(task.vocab_size)
    if prompt is None:
        prompt = task.prompts[int(rng.integers(len(task.prompts)))]
    history: list[int] = list(prompt)
    tokens: list[int] = []
    prefix_lens: list[int] = []
    observations: list[tuple[int, int]] = []
    contexts: list[ContextKey] = []
    for h in range(1, task.horizon + 1):
        prefix_lens.append(len(history))
        contexts.append(teacher_context(task, history, state))
        y = sample_token(snapshot, _own_context(snapshot, task, history), temperature, rng, trunc)
        tokens.append(y)
        obs = _advance(task, history, h, y)
        if obs is not None:
            observations.append((h, obs))
    return Trajectory(
        prompt=tuple(prompt),
        tokens=tuple(tokens),
        history=tuple(history),
        prefix_lens=tuple(prefix_lens),
        observations=tuple(observations),
        teacher_contexts=tuple(contexts),
        rollout_step=state.step,
        episode_id=episode_id,
    )


def replay_observations(task: TaskSpec, traj: Trajectory) -> tuple[tuple[int, int], ...]:
    """Regenerate observations from the stored tokens (determinism check)."""
    history: list[int] = list(traj.prompt)
    out: list[tuple[int, int]] = []
    for h, tok in enumerate(traj.tokens, start=1):
        obs = _advance(task, history, h, tok)
        if obs is not None:
            out.append((h, obs))
    return tuple(out)


def reward(task: TaskSpec, traj: Trajectory) -> bool:
    """Terminal correctness: every token equals the target continuation."""
    for h, tok in enumerate(traj.tokens, start=1):
        if tok != task.target_at(traj.replay_prefix(h)):
            return False
    return True


def target_path(task: TaskSpec, prompt: Sequence[int]) -> tuple[list[tuple[int, ...]], list[int]]:
    """Histories before each position and target tokens along the correct path."""
    history = list(prompt)
    prefixes: list[tuple[int, ...]] = []
    targets: list[int] = []
    for h in range(1, task.horizon + 1):
        prefixes.append(tuple(history))
        t = task.target_at(history)
        targets.append(t)
        _advance(task, history, h, t)
    return prefixes, targets


def evaluation_score(policy: PolicyLike, task: TaskSpec,
                     trunc: TruncationConfig | None = None) -> float:
    """Mean probability assigned to the target token along held-out target paths.

    Exact expectation of per-token correctness under teacher forcing; smooth
    in the parameters and deterministic, unlike sampled success rates. Works
    for any policy over the task alphabet, the wider-windowed teacher included.
    """
    trunc = trunc or default_truncation(task.vocab_size)
    total = 0.0
    for prompt in task.eval_prompts:
        prefixes, targets = target_path(task, prompt)
        ctxs = [_own_context(policy, task, h) for h in prefixes]
        probs = policy.probs_for_encoded(policy.encode_contexts(ctxs), trunc)
        total += float(probs[np.arange(len(targets)), targets].mean())
    return total / len(task.eval_prompts)


def greedy_success(policy: PolicyLike, task: TaskSpec) -> float:
    """Fraction of held-out prompts whose argmax decode matches the target path."""
    wins = 0
    for prompt in task.eval_prompts:
        history = list(prompt)
        ok = True
        for h in range(1, task.horizon + 1):
            enc = policy.encode_contexts([_own_context(policy, task, history)])
            y = int(np.argmax(policy.logits_for_encoded(enc)[0]))
            if y != task.target_at(history):
                ok = False
                break
            _advance(task, history, h, y)
        wins += ok
    return wins / len(task.eval_prompts)


@dataclass(frozen=True)
class Occupancy:
    """Exact distribution over prefixes holding a fixed number of tokens.

    depth = number of tokens already emitted; -1 marks a mixture over depths.
    """

    depth: int
    probs: dict[tuple[int, ...], float]

    def __post_init__(self):
        total = sum(self.probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"occupancy mass {total!r} != 1")


class EnumerationBudgetError(RuntimeError):
    """Raised when exact enumeration would exceed the prefix budget."""


def enumerate_occupancy(policy: PolicyLike, task: TaskSpec, depth: int,
                        trunc: TruncationConfig | None = None,
                        temperature: float = 1.0,
                        budget: int = 10 ** 6) -> Occupancy:
    """Exact prefix distribution after ``depth`` sampled tokens.

    Observations are injected deterministically, so prefixes are full
    histories. Raises EnumerationBudgetError beyond ``budget`` prefixes;
    use mc_occupancy there instead.
    """
    if not 0 <= depth <= task.horizon:
        raise ValueError(f"depth {depth} outside [0, {task.horizon}]")
    trunc = trunc or default_truncation(task.vocab_size)
    current: dict[tuple[int, ...], float] = {}
    for prompt in task.prompts:
        current[tuple(prompt)] = current.get(tuple(prompt), 0.0) + 1.0 / len(task.prompts)
    for d in range(1, depth + 1):
        prefixes = list(current.keys())
        if len(prefixes) * task.vocab_size > budget:
            raise EnumerationBudgetError(
                f"enumeration at depth {d} needs more than {budget} prefixes; "
                "use mc_occupancy"
            )
        encs = policy.encode_contexts([_own_context(policy, task, pfx) for pfx in prefixes])
        rows = policy.probs_for_encoded(encs, trunc, temperature=temperature)
        nxt: dict[tuple[int, ...], float] = {}
        for i, pfx in enumerate(prefixes):
            mass = current[pfx]
            for tok in range(task.vocab_size):
                p = mass * rows[i, tok]
                if p == 0.0:
                    continue
                hist = list(pfx)
                _advance(task, hist, d, tok)
                key = tuple(hist)
                nxt[key] = nxt.get(key, 0.0) + p
        current = nxt
    return Occupancy(depth=depth, probs=current)


def mc_occupancy(policy: PolicyLike, task: TaskSpec, depth: int, n_samples: int,
                 rng: np.random.Generator, trunc: TruncationConfig | None = None,
                 temperature: float = 1.0) -> Occupancy:
    """Monte Carlo estimate of the depth-``depth`` prefix distribution."""
    trunc = trunc or default_truncation(task.vocab_size)
    counts: dict[tuple[int, ...], float] = {}
    inv = 1.0 / n_samples
    for _ in range(n_samples):
        prompt = task.prompts[int(rng.integers(len(task.prompts)))]
        history = list(prompt)
        for d in range(1, depth + 1):
            tok = sample_token(policy, _own_context(policy, task, history), temperature, rng, trunc)
            _advance(task, history, d, tok)
        key = tuple(history)
        counts[key] = counts.get(key, 0.0) + inv
    return Occupancy(depth=depth, probs=counts)


def occupancy_tv(a: Occupancy, b: Occupancy) -> float:
    """Half the L1 distance over the union of prefixes; depths must match."""
    if a.depth != b.depth:
        raise ValueError(f"occupancy depth mismatch: {a.depth} vs {b.depth}")
    keys = set(a.probs) | set(b.probs)
    return 0.5 * sum(abs(a.probs.get(k, 0.0) - b.probs.get(k, 0.0)) for k in keys)


def occupancy_mixture(parts: Iterable[Occupancy]) -> Occupancy:
    """Uniform mixture over per-depth occupancies (prefix lengths never collide)."""
    parts = list(parts)
    mixed: dict[tuple[int, ...], float] = {}
    w = 1.0 / len(parts)
    for occ in parts:
        for k, p in occ.probs.items():
            mixed[k] = mixed.get(k, 0.0) + w * p
    return Occupancy(depth=-1, probs=mixed)


# -- task construction -------------------------------------------------------


def build_teacher(task: TaskSpec) -> PolicySnapshot:
    """Frozen tabular teacher over the widened window plus the aux slot.

    Base distribution: teacher_mass on the target token, remainder uniform.
    With an aux symbol present the base is mixed with teacher_tilt * onehot(aux),
    which shifts mass toward the aux symbol without moving the argmax.
    """
    v = task.vocab_size
    base_rows = (v + 1) ** task.teacher_window
    targets = task.target_table
    base = np.full((base_rows, v), (1.0 - task.teacher_mass) / (v - 1))
    base[np.arange(base_rows), targets] = task.teacher_mass
    aux_domain = v + 1
    table = np.empty((base_rows * aux_domain, v))
    table[0::aux_domain] = base  # aux index 0: payload absent
    rho = task.teacher_tilt
    for a in range(v):
        tilted = (1.0 - rho) * base
        tilted[:, a] += rho
        table[a + 1::aux_domain] = tilted
    if not np.array_equal(table.argmax(axis=1), np.repeat(targets, aux_domain)):
        raise ValueError("teacher_tilt too large: the tilt moves the argmax off the target")
    return PolicySnapshot(
        kind="tabular",
        vocab_size=v,
        window=task.teacher_window,
        aux_arity=1,
        weights=np.log(table),
        step=0,
    )


_FAMILY_DEFAULTS = {
    "single-step": dict(vocab_size=8, horizon=2, window=2, context_mode="static",
                        observation_positions=()),
    "tool-analog": dict(vocab_size=8, horizon=8, window=2, context_mode="policy-coupled",
                        observation_positions=(2, 5)),
    "long-horizon": dict(vocab_size=6, horizon=24, window=3, context_mode="policy-coupled",
                         observation_positions=None),  # filled in: every step
}


def make_task(family: str, seed: int = 0, n_prompts: int = 16, n_eval_prompts: int = 8,
              **overrides) -> TaskSpec:
    """Construct a task family instance; structure derives from ``seed``."""
    if family not in _FAMILY_DEFAULTS:
        raise ValueError(f"unknown family {family!r}")
    params = dict(_FAMILY_DEFAULTS[family])
    params.update(overrides)
    v = params["vocab_size"]
    horizon = params["horizon"]
    window = params["window"]
    if params.get("observation_positions") is None:
        params["observation_positions"] = tuple(range(1, horizon))
    rng = np.random.default_rng(seed)
    t_window = window + 1
    n_rows = (v + 1) ** t_window
    target_table = params.pop("target_table", None)
    if target_table is None:
        target_table = rng.integers(0, v, size=n_rows)
    obs_coeffs = params.pop("obs_coeffs", None)
    if obs_coeffs is None:
        obs_coeffs = tuple(int(c) for c in rng.integers(1, v, size=t_window))
    obs_offset = params.pop("obs_offset", int(rng.integers(0, v)))
    prompts = params.pop("prompts", None)
    eval_prompts = params.pop("eval_prompts", None)
    if prompts is None:
        seen: set[tuple[int, ...]] = set()
        pool: list[tuple[int, ...]] = []
        while len(pool) < n_prompts:
            cand = tuple(int(s) for s in rng.integers(0, v, size=t_window))
            if cand not in seen:
                seen.add(cand)
                pool.append(cand)
        prompts = tuple(pool)
    if eval_prompts is None:
        # evaluation probes the training distribution: a tabular student only
        # ever learns the contexts its rollouts visit, so held-out prompts
        # would measure nothing but initialization
        k = min(n_eval_prompts, len(prompts))
        idx = rng.choice(len(prompts), size=k, replace=False)
        eval_prompts = tuple(prompts[i] for i in sorted(idx))
    name = params.pop("name", f"{family}-s{seed}")
    return TaskSpec(
        name=name,
        family=family,
        target_table=np.asarray(target_table, dtype=np.int64),
        obs_coeffs=tuple(obs_coeffs),
        obs_offset=obs_offset,
        prompts=tuple(tuple(p) for p in prompts),
        eval_prompts=tuple(tuple(p) for p in eval_prompts),
        seed=seed,
        observation_positions=tuple(params.pop("observation_positions")),
        **params,
    )


def task_from_dict(cfg: dict) -> TaskSpec:
    """Build a task from a config mapping (the documented file schema).

    Required: family. Optional: seed, vocab_size, horizon, window,
    context_mode, observation_positions, obs_coeffs, obs_offset, drift_period,
    teacher_mass, teacher_tilt, n_prompts, n_eval_prompts, name, and explicit
    target_table / prompts / eval_prompts for fully pinned tasks.
    """
    cfg = dict(cfg)
    family = cfg.pop("family", None)
    if family is None:
        raise ValueError("task config needs a 'family' entry")
    seed = cfg.pop("seed", 0)
    n_prompts = cfg.pop("n_prompts", 16)
    n_eval = cfg.pop("n_eval_prompts", 8)
    known = {
        "name", "vocab_size", "horizon", "window", "context_mode",
        "observation_positions", "obs_coeffs", "obs_offset", "target_table",
        "prompts", "eval_prompts", "teacher_mass", "teacher_tilt", "drift_period",
    }
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown task config keys: {sorted(unknown)}")
    for key in ("observation_positions", "obs_coeffs"):
        if key in cfg:
            cfg[key] = tuple(cfg[key])
    if "prompts" in cfg:
        cfg["prompts"] = tuple(tuple(p) for p in cfg["prompts"])
    if "eval_prompts" in cfg:
        cfg["eval_prompts"] = tuple(tuple(p) for p in cfg["eval_prompts"])
    return make_task(family, seed=seed, n_prompts=n_prompts, n_eval_prompts=n_eval, **cfg)
