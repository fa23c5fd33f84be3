"""k-step model rollouts with correlated prediction noise.

A step draws e ~ N(0, Γ) and returns μ + D e with D = diag(scales), so the
sampled next state has covariance D Γ D.  A policy is any callable
``policy(states, rng) -> actions`` over ``(n, dim)`` state batches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import CorrelationError, CorrelationMatrix, Dataset, RngStream, split_rng, state_vec

CHOL_JITTER = 1e-10


@dataclass(frozen=True)
class RolloutConfig:
    k: int = 1
    n_starts: int = 1
    branch: int = 1

    def __post_init__(self):
        if self.k < 1 or self.n_starts < 1 or self.branch < 1:
            raise ValueError("k, n_starts and branch must all be >= 1")


@dataclass
class RolloutReport:
    truncated_branches: list = field(default_factory=list)

    @property
    def n_truncated(self) -> int:
        return len(self.truncated_branches)


def correlation_factor(corr) -> np.ndarray:
    """L with L Lᵀ = corr: jittered Cholesky, falling back to an eigen factor."""
    G = np.asarray(corr, dtype=np.float64)
    n = len(G)
    try:
        return np.linalg.cholesky(G + CHOL_JITTER * np.eye(n))
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(0.5 * (G + G.T))
    if not np.all(np.isfinite(w)) or w.min() < -1e-9:
        raise CorrelationError(f"cannot factor correlation matrix {G.tolist()}")
    return v * np.sqrt(np.clip(w, 0.0, None))


def sample_correlated(corr: CorrelationMatrix, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Draw from N(0, corr); one vector, or ``(size, n)`` when ``size`` is given."""
    L = correlation_factor(corr)
    n = L.shape[0]
    z = rng.standard_normal(n if size is None else (size, n))
    return z @ L.T


def step_model_batch(model, states, actions, rng: RngStream) -> np.ndarray:
    mu, scales = model.predict_batch(states, actions)
    e = sample_correlated(model.corr, rng, size=len(mu))
    return mu + scales * e


def step_model(model, s, a: int, rng: RngStream) -> np.ndarray:
    """Sample s' = μ + D e for one state; e ~ N(0, Γ)."""
    s = state_vec(s, model.dim)
    return step_model_batch(model, s[None], np.array([a]), rng)[0]


def rollout(model, policy: Callable, starts, cfg: RolloutConfig, reward_fn: Callable, rng: RngStream,
            capacity: int | None = None, report: RolloutReport | None = None) -> Dataset:
    """Roll ``cfg.branch`` branches of ``cfg.k`` model steps from each start.

    ``reward_fn(states, actions, next_states) -> (rewards, terminals)``.
    Branches stop at terminal states; a branch that produces a non-finite
    state is truncated before that step and listed in ``report``.  Records
    are ordered by step, then start, then branch.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float64))
    if len(starts) == 0:
        raise ValueError("need at least one start state")
    if starts.shape[1] != model.dim:
        raise ValueError("start states do not match the model dimension")
    s = np.repeat(starts, cfg.branch, axis=0)
    alive = np.ones(len(s), dtype=bool)
    parts = []
    for t in range(cfg.k):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        step_rng = split_rng(rng, f"step{t}")
        a = np.asarray(policy(s[idx], split_rng(step_rng, "policy")), dtype=np.int64)
        sp = step_model_batch(model, s[idx], a, split_rng(step_rng, "noise"))
        finite = np.all(np.isfinite(sp), axis=1)
        if report is not None:
            report.truncated_branches.extend((int(i), t) for i in idx[~finite])
        alive[idx[~finite]] = False
        keep = idx[finite]
        sp, a = sp[finite], a[finite]
        r, term = reward_fn(s[keep], a, sp)
        parts.append((s[keep].copy(), a, sp, np.asarray(r, dtype=np.float64), np.asarray(term, dtype=bool)))
        s[keep] = sp
        alive[keep[term]] = False
    if not parts:
        return Dataset.empty(model.dim, "model", capacity)
    cols = [np.concatenate(c) for c in zip(*parts)]
    return Dataset.from_arrays(*cols, provenance="model", capacity=capacity)
