"""Scikit-learn estimator facade over the training loop.

PolicyDistiller wraps one training run behind the familiar fit/predict/score
surface so hyperparameters can be swept with stock sklearn tooling;
pilot_grid_search is a small convenience for exactly that.
"""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.model_selection import ParameterGrid

from .buffer import RefreshPolicy
from .categorical import default_truncation
from .env import TaskSpec, evaluation_score, make_task, student_context, task_from_dict
from .freshness import FreshnessConfig
from .trainer import Trainer, TrainerConfig


def _as_task(x, seed: int) -> TaskSpec:
    if isinstance(x, TaskSpec):
        return x
    if isinstance(x, str):
        return make_task(x, seed=seed)
    if isinstance(x, Mapping):
        return task_from_dict(dict(x))
    raise TypeError(f"cannot build a task from {type(x).__name__}")


class PolicyDistiller(BaseEstimator):
    """Distill a task's teacher into a tabular student policy.

    ``fit`` accepts a TaskSpec, a task family name, or a task dict. Fitted
    attributes: ``student_`` (trained parameters), ``task_``, ``result_``
    (per-step records and evaluation trace), ``final_score_``, ``peak_score_``.
    """

    def __init__(self, mode: str = "f-opd", loss_kind: str = "forward-kl",
                 anchor_weight: float = 0.5, learning_rate: float = 0.05,
                 momentum: float = 0.9, batch_size: int = 32, steps: int = 400,
                 lag: int = 0, temperature: float = 0.7, eval_every: int = 10,
                 alpha: float = 1.0, beta: float = 1.0, xi: float = 0.05,
                 kappa_f: float = 0.1, kappa_roll: float = 0.5,
                 kappa_sup: float = 0.5, cooldown_steps: int = 20,
                 buffer_capacity: int = 256, seed: int = 0):
        self.mode = mode
        self.loss_kind = loss_kind
        self.anchor_weight = anchor_weight
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.steps = steps
        self.lag = lag
        self.temperature = temperature
        self.eval_every = eval_every
        self.alpha = alpha
        self.beta = beta
        self.xi = xi
        self.kappa_f = kappa_f
        self.kappa_roll = kappa_roll
        self.kappa_sup = kappa_sup
        self.cooldown_steps = cooldown_steps
        self.buffer_capacity = buffer_capacity
        self.seed = seed

    def _config(self) -> TrainerConfig:
        return TrainerConfig(
            mode=self.mode,
            loss_kind=self.loss_kind,
            anchor_weight=self.anchor_weight,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            batch_size=self.batch_size,
            steps=self.steps,
            lag=self.lag,
            temperature=self.temperature,
            eval_every=self.eval_every,
            seed=self.seed,
            buffer_capacity=self.buffer_capacity,
            freshness=FreshnessConfig(alpha=self.alpha, beta=self.beta, xi=self.xi),
            refresh_policy=RefreshPolicy(kappa_f=self.kappa_f,
                                         kappa_roll=self.kappa_roll,
                                         kappa_sup=self.kappa_sup,
                                         cooldown_steps=self.cooldown_steps),
        )

    def fit(self, X, y=None) -> "PolicyDistiller":
        task = _as_task(X, self.seed)
        trainer = Trainer(self._config(), task)
        result = trainer.run()
        self.task_ = task
        self.student_ = trainer.params
        self.result_ = result
        self.final_score_ = result.final_score
        self.peak_score_ = result.peak_score
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "student_"):
            raise NotFittedError("this PolicyDistiller is not fitted; call fit first")

    def _encode(self, histories: Iterable[Sequence[int]]) -> np.ndarray:
        ctxs = [student_context(self.task_, tuple(int(t) for t in h)) for h in histories]
        return self.student_.encode_contexts(ctxs)

    def predict(self, X) -> np.ndarray:
        """Greedy next token for each token history in ``X``."""
        self._check_fitted()
        return self.student_.logits_for_encoded(self._encode(X)).argmax(axis=1)

    def predict_proba(self, X) -> np.ndarray:
        """Truncated, floored next-token distributions, one row per history."""
        self._check_fitted()
        trunc = default_truncation(self.task_.vocab_size)
        return self.student_.probs_for_encoded(self._encode(X), trunc)

    def score(self, X=None, y=None) -> float:
        """Student's probability mass on the teacher's greedy paths."""
        self._check_fitted()
        task = self.task_ if X is None else _as_task(X, self.seed)
        trunc = default_truncation(task.vocab_size)
        return evaluation_score(self.student_, task, trunc)


def pilot_grid_search(task, param_grid: Mapping[str, Sequence],
                      seeds: Sequence[int] = (0, 1, 2),
                      base: Mapping | None = None) -> list[dict]:
    """Fit every grid point across seeds; rows sorted by mean final score.

    Each row carries the grid point's params, per-seed scores, and their
    mean and standard deviation.
    """
    rows = []
    for point in ParameterGrid(dict(param_grid)):
        params = {**(dict(base) if base else {}), **point}
        scores = []
        for seed in seeds:
            est = PolicyDistiller(**{**params, "seed": point.get("seed", seed)})
            est.fit(task)
            scores.append(est.final_score_)
        rows.append({
            "params": dict(point),
            "scores": scores,
            "mean_score": float(np.mean(scores)),
            "std_score": float(np.std(scores)),
        })
    rows.sort(key=lambda r: -r["mean_score"])
    return rows
