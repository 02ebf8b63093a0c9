"""Finite categorical distributions and the divergence kernels built on them.

All divergences are in nats. Functions accept any array-like over a shared
token alphabet; ``Categorical`` is the validated wrapper used at interface
boundaries, while the *_rows variants operate on (n, vocab) batches and are
the hot path for the training diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .validation import (
    check_in_range,
    check_positive_int,
    check_probability_vector,
    check_same_length,
)


@dataclass(frozen=True)
class Categorical:
    """Immutable probability vector over a finite token alphabet."""

    probs: np.ndarray

    def __post_init__(self):
        arr = check_probability_vector(self.probs, "probs")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    def __len__(self) -> int:
        return self.probs.shape[0]

    def __array__(self, dtype=None, copy=None):
        # Lets np.asarray(cat) work; the backing array is read-only.
        if dtype is None:
            return self.probs
        return self.probs.astype(dtype)


@dataclass(frozen=True)
class TruncationConfig:
    """Support truncation and floor applied to every evaluated distribution.

    top_k entries are kept by mass (ties broken toward the lower token index),
    each kept entry is pinned to at least ``floor``, and the kept mass is
    renormalized. top_k * floor <= 1 so the floored vector can still sum to 1.
    """

    top_k: int
    floor: float = 1e-6

    def __post_init__(self):
        check_positive_int(self.top_k, "top_k")
        check_in_range(self.floor, 0.0, 1.0, "floor", hi_open=True)
        if self.top_k * self.floor > 1.0:
            raise ValueError(
                f"top_k * floor = {self.top_k * self.floor!r} > 1; no valid distribution"
            )


def default_truncation(vocab_size: int) -> TruncationConfig:
    """Full support with a 1e-6 floor; the default for vocabularies <= 32."""
    return TruncationConfig(top_k=vocab_size, floor=1e-6)


def _as_pair(p, q) -> tuple[np.ndarray, np.ndarray]:
    p = check_probability_vector(p, "p")
    q = check_probability_vector(q, "q")
    check_same_length(p, q)
    return p, q


def kl(p, q) -> float:
    """KL(p || q) in nats over a shared alphabet.

    q must have no zero entry on p's support; feed q through
    ``truncate_and_floor`` first if that is not already guaranteed.
    """
    p, q = _as_pair(p, q)
    support = p > 0.0
    if np.any(q[support] <= 0.0):
        raise ValueError("q has a zero entry where p > 0; KL undefined (floor q first)")
    ps = p[support]
    return float(np.sum(ps * (np.log(ps) - np.log(q[support]))))


def tv(p, q) -> float:
    """Total variation distance: half the L1 distance, in [0, 1]."""
    p, q = _as_pair(p, q)
    return float(0.5 * np.abs(p - q).sum())


def pinsker_margin(p, q) -> tuple[float, float]:
    """Return (tv(p, q), sqrt(kl(p, q) / 2)); the first never exceeds the second."""
    return tv(p, q), float(np.sqrt(kl(p, q) / 2.0))


def entropy(p) -> float:
    """Shannon entropy in nats with the 0 * log 0 = 0 convention."""
    p = check_probability_vector(p, "p")
    ps = p[p > 0.0]
    return float(-np.sum(ps * np.log(ps)))


def _truncate_floor_vector(p: np.ndarray, trunc: TruncationConfig) -> np.ndarray:
    v = p.shape[0]
    k = min(trunc.top_k, v)
    floor = trunc.floor

    if k == v and float(p.min()) >= floor:
        # Fixed point already; returning the input unchanged keeps the common
        # case bit-identical with the raw vector.
        return p

    # Top-k by mass with ties to the lower index: sort on (-p, index).
    order = np.lexsort((np.arange(v), -p))
    kept = np.zeros(v, dtype=bool)
    kept[order[:k]] = True

    out = np.where(kept, p, 0.0)
    # Stable-set projection: pinned entries get exactly `floor`, the rest are
    # rescaled to fill the remaining mass. Iterating reaches the fixed point,
    # which is what makes the operation idempotent.
    pinned = np.zeros(v, dtype=bool)
    for _ in range(k + 1):
        free = kept & ~pinned
        free_mass = out[free].sum()
        budget = 1.0 - pinned.sum() * floor
        if free_mass <= 0.0:
            # Degenerate kept mass: spread the budget uniformly over free slots.
            scale = None
        else:
            scale = budget / free_mass
        if scale is not None:
            newly = free & (out * scale < floor)
        else:
            newly = free & (np.full(v, budget / max(free.sum(), 1)) < floor)
        if not newly.any():
            if scale is None:
                out[free] = budget / max(free.sum(), 1)
            else:
                # multiply before dividing so a lone survivor lands on the
                # budget exactly
                out = np.where(free, out * budget / free_mass, out)
            break
        pinned |= newly
    out = np.where(pinned, floor, out)
    return out


def truncate_and_floor(p, trunc: TruncationConfig) -> Categorical:
    """Project ``p`` onto the truncated, floored simplex.

    Idempotent: applying the projection to its own output returns it unchanged.
    """
    p = check_probability_vector(p, "p")
    return Categorical(_truncate_floor_vector(p, trunc))


def floor_rows(rows: np.ndarray, trunc: TruncationConfig) -> np.ndarray:
    """Apply ``truncate_and_floor`` to every row of an (n, vocab) array."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2:
        raise ValueError(f"expected (n, vocab) array, got shape {rows.shape}")
    if trunc.top_k >= rows.shape[1] and float(rows.min(initial=1.0)) >= trunc.floor:
        return rows
    out = rows.copy()
    for i in range(rows.shape[0]):
        out[i] = _truncate_floor_vector(rows[i], trunc)
    return out


def kl_rows(p_rows: np.ndarray, q_rows: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q) for (n, vocab) batches. No validation; hot path.

    Rows must already be floored so the log is defined; zero p entries are
    handled with the 0 * log 0 convention.
    """
    ratio = np.zeros_like(p_rows)
    pos = p_rows > 0.0
    ratio[pos] = p_rows[pos] * (np.log(p_rows[pos]) - np.log(q_rows[pos]))
    return ratio.sum(axis=1)


def tv_rows(p_rows: np.ndarray, q_rows: np.ndarray) -> np.ndarray:
    """Row-wise total variation for (n, vocab) batches. No validation."""
    return 0.5 * np.abs(p_rows - q_rows).sum(axis=1)


def entropy_rows(p_rows: np.ndarray) -> np.ndarray:
    """Row-wise entropy in nats for (n, vocab) batches. No validation."""
    terms = np.zeros_like(p_rows)
    pos = p_rows > 0.0
    terms[pos] = p_rows[pos] * np.log(p_rows[pos])
    return -terms.sum(axis=1)
