"""Input validation helpers shared across the package.

Small check_* functions in the spirit of sklearn's check_array: coerce,
validate, and return the canonical representation, raising ValueError with a
actionable message otherwise.
"""

from __future__ import annotations

import numpy as np

PROB_SUM_TOL = 1e-9


def check_probability_vector(p, name: str = "p") -> np.ndarray:
    """Coerce ``p`` to a 1-D float64 array and validate simplex membership.

    Entries must be finite, nonnegative, and sum to 1 within PROB_SUM_TOL.
    """
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be nonempty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    if np.any(arr < 0.0):
        raise ValueError(f"{name} contains negative entries")
    total = float(arr.sum())
    if abs(total - 1.0) > PROB_SUM_TOL:
        raise ValueError(f"{name} sums to {total!r}, expected 1 within {PROB_SUM_TOL}")
    return arr


def check_same_length(p: np.ndarray, q: np.ndarray) -> None:
    """Require two vectors over the same alphabet size."""
    if p.shape != q.shape:
        raise ValueError(f"support sizes differ: {p.shape} vs {q.shape}")


def check_in_range(value: float, lo: float, hi: float, name: str,
                   lo_open: bool = False, hi_open: bool = False) -> float:
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"{name} must be finite, got {value!r}")
    below = value <= lo if lo_open else value < lo
    above = value >= hi if hi_open else value > hi
    if below or above:
        lo_b = "(" if lo_open else "["
        hi_b = ")" if hi_open else "]"
        raise ValueError(f"{name}={value!r} outside {lo_b}{lo}, {hi}{hi_b}")
    return value


def check_nonnegative(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0.0:
        raise ValueError(f"{name} must be finite and >= 0, got {value!r}")
    return value


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise ValueError(f"{name} must be an integer, got {type(value).__name__}")
    if value <= 0:
        raise ValueError(f"{name} must be >= 1, got {value}")
    return int(value)


def check_symbol(value, vocab_size: int, name: str = "symbol") -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
        raise ValueError(f"{name} must be an integer, got {type(value).__name__}")
    if not 0 <= value < vocab_size:
        raise ValueError(f"{name}={value} outside token alphabet [0, {vocab_size})")
    return int(value)
