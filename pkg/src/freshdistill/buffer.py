"""Provenance-carrying sample buffer between rollout production and training.

Each resident sample remembers which policy snapshot produced it, the teacher
distributions it was labeled with at production time, and the stale student
distributions at its replay prefixes. Those caches are what the drift
diagnostics compare against, so they are written once at insert time and never
touched again. The snapshot store is refcounted: a snapshot stays resident
exactly as long as some sample still points at it.

The buffer is FIFO. Capacity eviction drops the oldest sample by rollout
step; training consumption pops from the front. One producer appends and one
trainer consumes; the deterministic test mode interleaves them sequentially.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable, Iterable

import numpy as np

from .categorical import TruncationConfig
from .env import TaskSpec, Trajectory, student_context
from .policy import ContextKey, PolicyLike, PolicySnapshot
from .validation import check_in_range, check_positive_int

if TYPE_CHECKING:
    from .freshness import FreshnessReport


class MissingSnapshotError(LookupError):
    """A sample's producing snapshot is no longer resident."""


class SnapshotStore:
    """Refcounted snapshot residency, keyed by the snapshot's step stamp."""

    def __init__(self):
        self._snaps: dict[int, PolicySnapshot] = {}
        self._refs: dict[int, int] = {}

    def put(self, snap: PolicySnapshot) -> int:
        key = snap.step
        if key not in self._snaps:
            self._snaps[key] = snap
        self._refs[key] = self._refs.get(key, 0) + 1
        return key

    def get(self, ref: int) -> PolicySnapshot:
        if ref not in self._snaps:
            raise MissingSnapshotError(f"snapshot {ref} not resident")
        return self._snaps[ref]

    def has(self, ref: int) -> bool:
        return ref in self._snaps

    def release(self, ref: int) -> None:
        count = self._refs.get(ref)
        if count is None:
            raise MissingSnapshotError(f"snapshot {ref} not resident")
        if count == 1:
            del self._refs[ref]
            del self._snaps[ref]
        else:
            self._refs[ref] = count - 1

    def refcount(self, ref: int) -> int:
        return self._refs.get(ref, 0)

    def __len__(self) -> int:
        return len(self._snaps)


@dataclass
class BufferedSample:
    """One rolled-out episode plus everything its diagnostics replay against.

    ``u_roll`` and ``u_sup`` are 1-indexed token positions where replay is
    evaluable / the teacher contexts are comparable; they are rewritten by
    every alignment pass, as is the report slot.
    """

    trajectory: Trajectory
    snapshot_ref: int
    teacher_label_dists: np.ndarray  # (H, V) teacher at label-time contexts
    stale_student_dists: np.ndarray  # (H, V) producing policy at replay prefixes
    student_enc: np.ndarray  # replay-prefix encodings, reusable by any same-shape policy
    teacher_enc: np.ndarray  # label-time teacher context encodings
    stored_aux_arity: np.ndarray  # (H,) aux payload length per stored context
    sample_id: int = 0
    u_roll: tuple[int, ...] = ()
    u_sup: tuple[int, ...] = ()
    report: "FreshnessReport | None" = None
    valid: bool = True

    @property
    def rollout_step(self) -> int:
        return self.trajectory.rollout_step

    @property
    def token_length(self) -> int:
        return len(self.trajectory.tokens)


def make_sample(traj: Trajectory, task: TaskSpec, teacher: PolicyLike,
                producer: PolicySnapshot, store: SnapshotStore,
                trunc: TruncationConfig, sample_id: int = 0) -> BufferedSample:
    """Label a trajectory and freeze its provenance caches.

    ``producer`` must be the snapshot the trajectory was rolled out under;
    the call acquires one store reference to it.
    """
    ref = store.put(producer)
    h = len(traj.tokens)
    ctxs = [student_context(task, traj.replay_prefix(i)) for i in range(1, h + 1)]
    student_enc = producer.encode_contexts(ctxs)
    stale = producer.probs_for_encoded(student_enc, trunc)
    teacher_enc = teacher.encode_contexts(list(traj.teacher_contexts))
    labels = teacher.probs_for_encoded(teacher_enc, trunc)
    arity = np.array([len(c.aux) for c in traj.teacher_contexts], dtype=np.int8)
    full = tuple(range(1, h + 1))
    return BufferedSample(
        trajectory=traj,
        snapshot_ref=ref,
        teacher_label_dists=labels,
        stale_student_dists=stale,
        student_enc=student_enc,
        teacher_enc=teacher_enc,
        stored_aux_arity=arity,
        sample_id=sample_id,
        u_roll=full,
        u_sup=full,
    )


def compute_alignment(sample: BufferedSample, task: TaskSpec,
                      current_policy: PolicyLike, store: SnapshotStore,
                      ) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Position sets where replay and relabeling are well-defined.

    A position enters u_roll when both the current policy and the producing
    snapshot can evaluate its replay prefix (same window and alphabet; the
    full history is stored, so this is all positions or none). It enters
    u_sup when the stored teacher context has the same auxiliary arity the
    current context mode produces: differing payloads stay comparable (that
    difference is exactly supervision drift), missing payloads do not.

    A missing snapshot marks the sample invalid and empties both sets.
    """
    if not store.has(sample.snapshot_ref):
        sample.valid = False
        return (), ()
    snap = store.get(sample.snapshot_ref)
    h = sample.token_length
    comparable = (current_policy.window == snap.window
                  and current_policy.vocab_size == snap.vocab_size)
    u_roll = tuple(range(1, h + 1)) if comparable else ()
    current_arity = 0 if task.context_mode == "static" else 1
    u_sup = tuple(i + 1 for i in range(h) if sample.stored_aux_arity[i] == current_arity)
    return u_roll, u_sup


@dataclass(frozen=True)
class BufferAggregates:
    mean_freshness: float
    mean_roll_alignment: float
    mean_sup_alignment: float
    size: int
    lag_histogram: dict[int, int]


@dataclass(frozen=True)
class RefreshPolicy:
    """Thresholds for the adaptive refresh rule, plus its cooldown."""

    kappa_f: float = 0.1
    kappa_roll: float = 0.5
    kappa_sup: float = 0.5
    cooldown_steps: int = 20

    def __post_init__(self):
        check_in_range(self.kappa_f, 0.0, 1.0, "kappa_f")
        check_in_range(self.kappa_roll, 0.0, 1.0, "kappa_roll")
        check_in_range(self.kappa_sup, 0.0, 1.0, "kappa_sup")
        if self.cooldown_steps < 0:
            raise ValueError("cooldown_steps must be >= 0")


class Buffer:
    """FIFO sample buffer with capacity eviction by oldest rollout step."""

    def __init__(self, capacity: int = 256, store: SnapshotStore | None = None):
        check_positive_int(capacity, "capacity")
        self.capacity = capacity
        self.store = store if store is not None else SnapshotStore()
        self._samples: list[BufferedSample] = []

    def __len__(self) -> int:
        return len(self._samples)

    @property
    def samples(self) -> tuple[BufferedSample, ...]:
        return tuple(self._samples)

    def insert(self, sample: BufferedSample) -> None:
        self._samples.append(sample)
        while len(self._samples) > self.capacity:
            oldest = min(range(len(self._samples)), key=lambda i: self._samples[i].rollout_step)
            evicted = self._samples.pop(oldest)
            self.store.release(evicted.snapshot_ref)

    def consume(self, n: int) -> list[BufferedSample]:
        """Pop the n oldest samples (the next training minibatch)."""
        if n > len(self._samples):
            raise ValueError(f"cannot consume {n} of {len(self._samples)} samples")
        batch, self._samples = self._samples[:n], self._samples[n:]
        for sample in batch:
            self.store.release(sample.snapshot_ref)
        return batch

    def clear(self) -> None:
        for sample in self._samples:
            self.store.release(sample.snapshot_ref)
        self._samples = []


def aggregates(buffer: Buffer) -> BufferAggregates:
    """Exact means of the per-sample report fields over resident samples."""
    samples = buffer.samples
    if not samples:
        raise ValueError("empty buffer has no aggregates; refresh required")
    seen = []
    for s in samples:
        if s.report is None:
            raise ValueError(f"sample {s.sample_id} has no freshness report")
        seen.append(s.report)
    hist: dict[int, int] = {}
    for r in seen:
        hist[r.lag] = hist.get(r.lag, 0) + 1
    return BufferAggregates(
        mean_freshness=float(np.mean([r.score for r in seen])),
        mean_roll_alignment=float(np.mean([r.m_roll for r in seen])),
        mean_sup_alignment=float(np.mean([r.m_sup for r in seen])),
        size=len(seen),
        lag_histogram=hist,
    )


def should_refresh(aggs: BufferAggregates, policy: RefreshPolicy,
                   steps_since_last_refresh: int) -> bool:
    """Refresh when freshness or alignment breaches thresholds, post-cooldown.

    The freshness comparison is inclusive (triggers at the threshold), the
    alignment comparisons are strict.
    """
    if steps_since_last_refresh < policy.cooldown_steps:
        return False
    return (aggs.mean_freshness <= policy.kappa_f
            or aggs.mean_roll_alignment < policy.kappa_roll
            or aggs.mean_sup_alignment < policy.kappa_sup)


def refresh(buffer: Buffer, make_samples: Callable[[int], Iterable[BufferedSample]],
            count: int) -> Buffer:
    """Replace the whole buffer with ``count`` freshly produced samples.

    Partial replacement is deliberately not offered; staleness is a property
    of the producing snapshot, so keeping old samples would keep old drift.
    """
    buffer.clear()
    for sample in make_samples(count):
        buffer.insert(sample)
    return buffer


# -- dump / restore -----------------------------------------------------------


def _ctx_to_json(ctx: ContextKey) -> dict:
    return {"window": list(ctx.window), "aux": list(ctx.aux)}


def _ctx_from_json(d: dict) -> ContextKey:
    return ContextKey(tuple(d["window"]), tuple(d["aux"]))


def dump_buffer(buffer: Buffer, path) -> None:
    """One sample per JSONL line, floats at full precision."""
    with open(path, "w") as fh:
        for s in buffer.samples:
            t = s.trajectory
            row = {
                "sample_id": s.sample_id,
                "snapshot_ref": s.snapshot_ref,
                "valid": s.valid,
                "u_roll": list(s.u_roll),
                "u_sup": list(s.u_sup),
                "trajectory": {
                    "prompt": list(t.prompt),
                    "tokens": list(t.tokens),
                    "history": list(t.history),
                    "prefix_lens": list(t.prefix_lens),
                    "observations": [list(o) for o in t.observations],
                    "teacher_contexts": [_ctx_to_json(c) for c in t.teacher_contexts],
                    "rollout_step": t.rollout_step,
                    "episode_id": t.episode_id,
                },
                "teacher_label_dists": s.teacher_label_dists.tolist(),
                "stale_student_dists": s.stale_student_dists.tolist(),
                "student_enc": s.student_enc.tolist(),
                "teacher_enc": s.teacher_enc.tolist(),
                "stored_aux_arity": s.stored_aux_arity.tolist(),
                "report": None if s.report is None else s.report.to_json(),
            }
            fh.write(json.dumps(row) + "\n")


def load_samples(path) -> list[BufferedSample]:
    """Rebuild dumped samples for post-hoc analysis.

    Snapshot refcounts are not reconstructed; restored samples reference
    snapshots by id only.
    """
    from .freshness import FreshnessReport

    out: list[BufferedSample] = []
    with open(path) as fh:
        for line in fh:
            row = json.loads(line)
            t = row["trajectory"]
            traj = Trajectory(
                prompt=tuple(t["prompt"]),
                tokens=tuple(t["tokens"]),
                history=tuple(t["history"]),
                prefix_lens=tuple(t["prefix_lens"]),
                observations=tuple((p, s) for p, s in t["observations"]),
                teacher_contexts=tuple(_ctx_from_json(c) for c in t["teacher_contexts"]),
                rollout_step=t["rollout_step"],
                episode_id=t["episode_id"],
            )
            out.append(BufferedSample(
                trajectory=traj,
                snapshot_ref=row["snapshot_ref"],
                teacher_label_dists=np.array(row["teacher_label_dists"]),
                stale_student_dists=np.array(row["stale_student_dists"]),
                student_enc=np.array(row["student_enc"], dtype=np.int64),
                teacher_enc=np.array(row["teacher_enc"], dtype=np.int64),
                stored_aux_arity=np.array(row["stored_aux_arity"], dtype=np.int8),
                sample_id=row["sample_id"],
                u_roll=tuple(row["u_roll"]),
                u_sup=tuple(row["u_sup"]),
                report=None if row["report"] is None else FreshnessReport.from_json(row["report"]),
                valid=row["valid"],
            ))
    return out
