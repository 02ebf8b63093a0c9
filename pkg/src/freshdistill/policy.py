"""Softmax token policies over windowed contexts.

Two parameterizations share one interface: "tabular" keeps an independent
logit row per context, "linear" scores tokens from one-hot slot features.
Contexts are encoded as (window, aux) pairs where the window holds the most
recent symbols (left-padded with PAD = vocab_size) and aux is an optional
auxiliary conditioning symbol used by context-coupled teachers.

The gradient functions differentiate losses with respect to the raw softmax
output; support flooring is applied downstream by ``predict`` and does not
enter the analytic gradients (with the default full-support truncation the
floored and raw vectors are bit-identical whenever no entry is below the
floor, which is the operating regime).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .categorical import Categorical, TruncationConfig, floor_rows
from .validation import check_positive_int

LOSS_KINDS = ("forward-kl", "reverse-kl")


def window_from_history(history: Sequence[int], width: int, vocab_size: int) -> tuple[int, ...]:
    """Last ``width`` symbols of ``history``, left-padded with PAD = vocab_size."""
    tail = tuple(int(s) for s in history[-width:]) if width > 0 else ()
    if len(tail) < width:
        tail = (vocab_size,) * (width - len(tail)) + tail
    return tail


@dataclass(frozen=True)
class ContextKey:
    """A prediction context: recent-symbol window plus auxiliary payload.

    ``aux`` is empty or a single symbol; policies with aux_arity = 0 reject
    nonempty payloads rather than silently ignoring them.
    """

    window: tuple[int, ...]
    aux: tuple[int, ...] = ()

    def __post_init__(self):
        if len(self.aux) > 1:
            raise ValueError(f"aux payload holds at most one symbol, got {self.aux!r}")


class _PolicyCore:
    """Shape bookkeeping shared by live parameters and frozen snapshots."""

    kind: str
    vocab_size: int
    window: int
    aux_arity: int
    weights: np.ndarray

    # -- encodings -------------------------------------------------------

    @property
    def _base(self) -> int:
        return self.vocab_size + 1  # tokens plus PAD

    @property
    def _aux_domain(self) -> int:
        return self.vocab_size + 1 if self.aux_arity else 1  # "absent" plus tokens

    @property
    def n_slots(self) -> int:
        return self.window + self.aux_arity

    def table_rows(self) -> int:
        return self._base ** self.window * self._aux_domain

    def feature_dim(self) -> int:
        return self.n_slots * self._base + 1  # one-hot per slot plus bias

    def _check_ctx(self, ctx: ContextKey) -> None:
        if len(ctx.window) != self.window:
            raise ValueError(
                f"context window length {len(ctx.window)} != policy window {self.window}"
            )
        if len(ctx.aux) > self.aux_arity:
            raise ValueError("context carries an aux payload this policy does not condition on")
        for s in ctx.window:
            if not 0 <= s <= self.vocab_size:
                raise ValueError(f"window symbol {s} outside [0, {self.vocab_size}]")
        for s in ctx.aux:
            if not 0 <= s < self.vocab_size:
                raise ValueError(f"aux symbol {s} outside [0, {self.vocab_size})")

    def window_index(self, window: Sequence[int]) -> int:
        idx = 0
        for s in window:
            idx = idx * self._base + int(s)
        return idx

    def encode(self, ctx: ContextKey) -> np.ndarray:
        """Encode one context; see ``encode_contexts`` for the batch layout."""
        return self.encode_contexts([ctx])[0]

    def encode_contexts(self, ctxs: Sequence[ContextKey]) -> np.ndarray:
        """Vector of table rows (tabular) or a feature-index matrix (linear).

        For the linear kind the matrix has one one-hot feature index per slot;
        the implicit bias feature is appended inside the logit/gradient ops.
        """
        for ctx in ctxs:
            self._check_ctx(ctx)
        if self.kind == "tabular":
            rows = np.empty(len(ctxs), dtype=np.int64)
            for i, ctx in enumerate(ctxs):
                aux_idx = 1 + ctx.aux[0] if ctx.aux else 0
                rows[i] = self.window_index(ctx.window) * self._aux_domain + aux_idx
            return rows
        mat = np.empty((len(ctxs), self.n_slots), dtype=np.int64)
        for i, ctx in enumerate(ctxs):
            for j, s in enumerate(ctx.window):
                mat[i, j] = j * self._base + int(s)
            if self.aux_arity:
                # The aux slot reuses the PAD position of its one-hot block for
                # "absent", so the block size stays vocab_size + 1.
                aux_feat = ctx.aux[0] if ctx.aux else self.vocab_size
                mat[i, self.window] = self.window * self._base + aux_feat
        return mat

    def set_aux_slot(self, enc: np.ndarray, aux_symbols: np.ndarray) -> np.ndarray:
        """Re-encode a batch with new aux payloads (entries < 0 mean absent)."""
        if not self.aux_arity:
            raise ValueError("policy has no aux slot")
        aux_symbols = np.asarray(aux_symbols, dtype=np.int64)
        if self.kind == "tabular":
            base = enc // self._aux_domain
            aux_idx = np.where(aux_symbols < 0, 0, aux_symbols + 1)
            return base * self._aux_domain + aux_idx
        out = enc.copy()
        out[:, self.window] = self.window * self._base + np.where(
            aux_symbols < 0, self.vocab_size, aux_symbols
        )
        return out

    # -- forward ---------------------------------------------------------

    def logits_for_encoded(self, enc: np.ndarray) -> np.ndarray:
        if self.kind == "tabular":
            return self.weights[enc]
        return self.weights[enc].sum(axis=1) + self.weights[-1]

    def probs_for_encoded(self, enc: np.ndarray, trunc: TruncationConfig | None = None,
                          temperature: float = 1.0) -> np.ndarray:
        z = self.logits_for_encoded(enc)
        if temperature != 1.0:
            if temperature <= 0.0:
                raise ValueError("temperature must be > 0 for a sampling distribution")
            z = z / temperature
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        if trunc is not None:
            p = floor_rows(p, trunc)
        return p


@dataclass
class PolicyParams(_PolicyCore):
    """Live, trainable policy parameters plus optimizer state.

    ``step_stamp`` counts optimizer steps and is incremented by the caller,
    not by ``apply_update``.
    """

    kind: str
    vocab_size: int
    window: int
    aux_arity: int = 0
    weights: np.ndarray = None
    step_stamp: int = 0
    velocity: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("tabular", "linear-features"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        check_positive_int(self.vocab_size, "vocab_size")
        if self.window < 0 or self.aux_arity not in (0, 1):
            raise ValueError("window must be >= 0 and aux_arity in {0, 1}")
        shape = (
            (self.table_rows(), self.vocab_size)
            if self.kind == "tabular"
            else (self.feature_dim(), self.vocab_size)
        )
        if self.weights is None:
            self.weights = np.zeros(shape, dtype=np.float64)
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != shape:
                raise ValueError(f"weights shape {self.weights.shape} != expected {shape}")
        if self.velocity is None:
            self.velocity = np.zeros_like(self.weights)
        elif self.velocity.shape != self.weights.shape:
            raise ValueError("velocity shape mismatch")


@dataclass(frozen=True)
class PolicySnapshot(_PolicyCore):
    """Frozen copy of policy weights stamped with the step that produced it."""

    kind: str
    vocab_size: int
    window: int
    aux_arity: int
    weights: np.ndarray
    step: int

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


PolicyLike = _PolicyCore


def snapshot(params: PolicyParams) -> PolicySnapshot:
    """Freeze the current weights; later updates to ``params`` do not leak in."""
    return PolicySnapshot(
        kind=params.kind,
        vocab_size=params.vocab_size,
        window=params.window,
        aux_arity=params.aux_arity,
        weights=params.weights,
        step=params.step_stamp,
    )


def predict(policy: PolicyLike, ctx: ContextKey, trunc: TruncationConfig) -> Categorical:
    """The policy's next-token distribution at ``ctx``, truncated and floored."""
    p = policy.probs_for_encoded(policy.encode_contexts([ctx]), trunc)[0]
    return Categorical(p)


def sample_token(policy: PolicyLike, ctx: ContextKey, temperature: float,
                 rng: np.random.Generator, trunc: TruncationConfig) -> int:
    """Draw one token. temperature = 0 is greedy argmax (ties to lower index)."""
    if temperature < 0.0:
        raise ValueError("temperature must be >= 0")
    enc = policy.encode_contexts([ctx])
    if temperature == 0.0:
        return int(np.argmax(policy.logits_for_encoded(enc)[0]))
    p = policy.probs_for_encoded(enc, trunc, temperature=temperature)[0]
    return int(np.searchsorted(np.cumsum(p), rng.random(), side="right").clip(0, len(p) - 1))


def _softmax_1d(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def loss_gradient_wrt_logits(p: np.ndarray, target: np.ndarray, loss_kind: str) -> np.ndarray:
    """d loss / d logits for one position, given the softmax output ``p``.

    forward-kl: KL(target || p), gradient p - target.
    reverse-kl: KL(p || target), gradient p * (log(p / target) - KL(p || target)).
    """
    if loss_kind == "forward-kl":
        return p - target
    if loss_kind == "reverse-kl":
        if np.any(target <= 0.0):
            raise ValueError("reverse-kl needs a strictly positive target; floor it first")
        ratio = np.log(p) - np.log(target)
        return p * (ratio - float(np.dot(p, ratio)))
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def distill_loss(params: PolicyLike, ctx: ContextKey, target, loss_kind: str) -> float:
    """Distillation loss at one context against a fixed target distribution."""
    target = np.asarray(target, dtype=np.float64)
    p = _softmax_1d(params.logits_for_encoded(params.encode_contexts([ctx]))[0])
    if loss_kind == "forward-kl":
        sup = target > 0.0
        return float(np.sum(target[sup] * (np.log(target[sup]) - np.log(p[sup]))))
    if loss_kind == "reverse-kl":
        if np.any(target <= 0.0):
            raise ValueError("reverse-kl needs a strictly positive target; floor it first")
        return float(np.sum(p * (np.log(p) - np.log(target))))
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def accumulate_logit_gradient(policy: PolicyLike, enc: np.ndarray, dz: np.ndarray,
                              out: np.ndarray) -> None:
    """Scatter per-position logit gradients ``dz`` into a weight-shaped buffer."""
    if policy.kind == "tabular":
        np.add.at(out, enc, dz)
    else:
        for j in range(enc.shape[1]):
            np.add.at(out, enc[:, j], dz)
        out[-1] += dz.sum(axis=0)


def distill_gradient(params: PolicyParams, ctx: ContextKey, target, loss_kind: str) -> np.ndarray:
    """Exact analytic gradient of ``distill_loss`` with respect to the weights."""
    target = np.asarray(target, dtype=np.float64)
    enc = params.encode_contexts([ctx])
    p = _softmax_1d(params.logits_for_encoded(enc)[0])
    dz = loss_gradient_wrt_logits(p, target, loss_kind)
    grad = np.zeros_like(params.weights)
    accumulate_logit_gradient(params, enc, dz[None, :], grad)
    return grad


def apply_update(params: PolicyParams, gradient: np.ndarray, lr: float,
                 momentum: float) -> PolicyParams:
    """In-place SGD-with-momentum step: v <- momentum * v + g; w <- w - lr * v."""
    gradient = np.asarray(gradient, dtype=np.float64)
    if gradient.shape != params.weights.shape:
        raise ValueError(f"gradient shape {gradient.shape} != weights {params.weights.shape}")
    if not np.all(np.isfinite(gradient)):
        raise ValueError("non-finite gradient; training state is corrupt")
    params.velocity *= momentum
    params.velocity += gradient
    params.weights -= lr * params.velocity
    return params


@dataclass(frozen=True)
class GradientCheckReport:
    max_rel_error: float
    h: float
    h_flagged: bool  # step sizes this large defeat central differencing
    n_coords: int


def finite_diff_check(params: PolicyParams, loss_fn: Callable[[PolicyParams], float],
                      analytic_grad: np.ndarray, h: float = 1e-5) -> GradientCheckReport:
    """Compare ``analytic_grad`` against central differences of ``loss_fn``.

    Every weight coordinate is perturbed by +-h. Relative error uses
    max(|fd|, |analytic|, 1e-6) in the denominator so untouched coordinates
    (both sides zero) contribute zero.
    """
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    if analytic_grad.shape != params.weights.shape:
        raise ValueError("analytic gradient shape mismatch")
    w = params.weights
    flat = w.ravel()
    fd = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn(params)
        flat[i] = orig - h
        down = loss_fn(params)
        flat[i] = orig
        fd[i] = (up - down) / (2.0 * h)
    fd = fd.reshape(w.shape)
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(analytic_grad)), 1e-6)
    max_rel = float((np.abs(fd - analytic_grad) / denom).max()) if flat.size else 0.0
    return GradientCheckReport(max_rel_error=max_rel, h=h, h_flagged=h > 0.05,
                               n_coords=int(flat.size))


def save_snapshot(snap: PolicySnapshot, path) -> None:
    """Write a snapshot as JSON; floats round-trip bit-exactly via repr."""
    payload = {
        "kind": snap.kind,
        "vocab_size": snap.vocab_size,
        "window": snap.window,
        "aux_arity": snap.aux_arity,
        "step": snap.step,
        "weights": snap.weights.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_snapshot(path) -> PolicySnapshot:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return PolicySnapshot(
        kind=payload["kind"],
        vocab_size=payload["vocab_size"],
        window=payload["window"],
        aux_arity=payload["aux_arity"],
        weights=np.array(payload["weights"], dtype=np.float64),
        step=payload["step"],
    )
