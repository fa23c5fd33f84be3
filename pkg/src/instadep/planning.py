"""Exact tabular planning on discretized environments.

Transitions come in three interchangeable forms: a dense ``(S, A, S')``
array, a sparse ``(S*A, S')`` matrix, or :class:`ProductTransitions`
holding one marginal per next-state dimension (the lagged form).  All of
them expose expectations of next-state vectors, which is all value
iteration needs.

Rewards decompose as ``R[s, a] + E[next_reward[s']]``.  Keeping the
next-state part separate matters: a reward that depends jointly on several
next-state dimensions is exactly where lagged and true transitions give
different expectations.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core import RngStream, split_rng
from .envs import DrivingParams


class ConvergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Grids
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Grid:
    """Product grid of equal-width cells; cell centers represent their cells."""

    lows: tuple[float, ...]
    highs: tuple[float, ...]
    n_cells: tuple[int, ...]

    def __post_init__(self):
        lows = tuple(float(x) for x in self.lows)
        highs = tuple(float(x) for x in self.highs)
        n_cells = tuple(int(x) for x in self.n_cells)
        if not (len(lows) == len(highs) == len(n_cells)) or not lows:
            raise ValueError("lows, highs and n_cells need one entry per dimension")
        if any(h <= l for l, h in zip(lows, highs)):
            raise ValueError("need lo < hi in every dimension")
        if min(n_cells) < 2:
            raise ValueError("need at least 2 cells per dimension")
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)
        object.__setattr__(self, "n_cells", n_cells)

    @classmethod
    def uniform(cls, lo: float, hi: float, n: int, dim: int) -> "Grid":
        return cls((lo,) * dim, (hi,) * dim, (n,) * dim)

    @property
    def dim(self) -> int:
        return len(self.n_cells)

    @property
    def size(self) -> int:
        return int(np.prod(self.n_cells))

    @property
    def widths(self) -> np.ndarray:
        return (np.asarray(self.highs) - np.asarray(self.lows)) / np.asarray(self.n_cells)

    def axis_centers(self, d: int) -> np.ndarray:
        w = self.widths[d]
        return self.lows[d] + w * (np.arange(self.n_cells[d]) + 0.5)

    def centers(self) -> np.ndarray:
        """All cell centers, ``(size, dim)``, in C (row-major) index order."""
        axes = np.meshgrid(*[self.axis_centers(d) for d in range(self.dim)], indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1)

    def coords(self, states) -> tuple[np.ndarray, int]:
        """Per-dimension cell coordinates and the number of clamped states."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        raw = np.floor((states - np.asarray(self.lows)) / self.widths).astype(np.int64)
        top = np.asarray(self.n_cells) - 1
        clamped = np.any((raw < 0) | (raw > top), axis=1)
        return np.clip(raw, 0, top), int(clamped.sum())

    def index(self, states, return_clamped: bool = False):
        c, n_clamped = self.coords(states)
        idx = np.ravel_multi_index(c.T, self.n_cells)
        return (idx, n_clamped) if return_clamped else idx

    def covering(self, lows, highs) -> "Grid":
        """Grid with the same cell widths and phase, extended to cover [lows, highs]."""
        w = self.widths
        lo_steps = np.floor((np.asarray(lows) - np.asarray(self.lows)) / w).astype(int)
        hi_steps = np.ceil((np.asarray(highs) - np.asarray(self.lows)) / w).astype(int)
        lo_steps = np.minimum(lo_steps, 0)
        hi_steps = np.maximum(hi_steps, np.asarray(self.n_cells))
        new_lows = np.asarray(self.lows) + lo_steps * w
        return Grid(tuple(new_lows), tuple(new_lows + (hi_steps - lo_steps) * w),
                    tuple(hi_steps - lo_steps))


# --------------------------------------------------------------------------
# Transition containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProductTransitions:
    """Next-state law equal to the product of per-dimension marginals.

    ``marginals[d]`` has shape ``(S, A, n_d)``; the joint next-state index
    is the row-major index over ``(n_0, n_1, ...)``.
    """

    marginals: tuple

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(m.shape[2] for m in self.marginals)

    def expect(self, vec: np.ndarray) -> np.ndarray:
        t = np.asarray(vec, dtype=np.float64).reshape(self.shape)
        letters = "ijklmnopqr"[: len(self.shape)]
        ops = ",".join(f"sa{c}" for c in letters)
        return np.einsum(f"{ops},{letters}->sa", *self.marginals, t, optimize=True)

    def dense(self) -> np.ndarray:
        out = self.marginals[0]
        for m in self.marginals[1:]:
            out = (out[..., :, None] * m[..., None, :]).reshape(out.shape[0], out.shape[1], -1)
        return out


def _expect(P, vec: np.ndarray, S: int, A: int) -> np.ndarray:
    if isinstance(P, ProductTransitions):
        return P.expect(vec)
    if sp.issparse(P):
        return np.asarray(P @ vec).reshape(S, A)
    return P @ vec


def _support(P, s: int, a: int) -> np.ndarray:
    if isinstance(P, ProductTransitions):
        nz = [np.flatnonzero(m[s, a] > 0) for m in P.marginals]
        grids = np.meshgrid(*nz, indexing="ij")
        return np.ravel_multi_index([g.ravel() for g in grids], P.shape)
    return np.flatnonzero(P[s, a] > 0)


@dataclass
class TabularMDP:
    """Finite MDP ``<S, A, P, R, gamma>`` with optional next-state reward.

    The expected one-step reward is ``R[s, a] + sum_s' P[s, a, s'] next_reward[s']``.
    ``terminal[s']`` marks absorbing next states whose continuation value
    is zero.  The next-state space may differ from the state space only
    when ``gamma == 0``.
    """

    P: object
    R: np.ndarray
    gamma: float
    terminal: Optional[np.ndarray] = None
    next_reward: Optional[np.ndarray] = None
    state_grid: Optional[Grid] = None
    next_grid: Optional[Grid] = None
    clamped: int = 0
    outcome_shape: Optional[tuple] = None

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        if self.R.ndim != 2 or not np.all(np.isfinite(self.R)):
            raise ValueError("R must be a finite (S, A) array")
        S, A = self.R.shape
        if isinstance(self.P, ProductTransitions):
            n_next = int(np.prod(self.P.shape))
            for m in self.P.marginals:
                if m.shape[:2] != (S, A) or np.any(m < 0):
                    raise ValueError("marginals must be nonnegative (S, A, n_d) arrays")
                if np.abs(m.sum(axis=2) - 1).max() > 1e-9:
                    raise ValueError("marginal rows must sum to 1")
        elif sp.issparse(self.P):
            self.P = sp.csr_matrix(self.P)
            if self.P.shape[0] != S * A:
                raise ValueError("sparse P must have S*A rows")
            n_next = self.P.shape[1]
            if self.P.nnz and self.P.data.min() < 0:
                raise ValueError("probabilities must be nonnegative")
            if np.abs(np.asarray(self.P.sum(axis=1)).ravel() - 1).max() > 1e-9:
                raise ValueError("each P[s, a] must sum to 1")
        else:
            self.P = np.asarray(self.P, dtype=np.float64)
            if self.P.ndim != 3 or self.P.shape[:2] != (S, A):
                raise ValueError("dense P must be (S, A, S')")
            n_next = self.P.shape[2]
            if np.any(self.P < 0) or np.abs(self.P.sum(axis=2) - 1).max() > 1e-9:
                raise ValueError("each P[s, a] must be a probability vector")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.gamma > 0 and n_next != S:
            raise ValueError("multi-step MDPs need the next-state space to equal the state space")
        self.terminal = np.zeros(n_next, dtype=bool) if self.terminal is None \
            else np.asarray(self.terminal, dtype=bool).reshape(n_next)
        if self.next_reward is not None:
            self.next_reward = np.asarray(self.next_reward, dtype=np.float64).reshape(n_next)
            if not np.all(np.isfinite(self.next_reward)):
                raise ValueError("next_reward must be finite")

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]

    @property
    def n_next(self) -> int:
        return len(self.terminal)

    def expect(self, vec) -> np.ndarray:
        """``(S, A)`` array of E[vec(s') | s, a]."""
        return _expect(self.P, np.asarray(vec, dtype=np.float64), self.n_states, self.n_actions)

    def expected_reward(self) -> np.ndarray:
        if self.next_reward is None:
            return self.R
        return self.R + self.expect(self.next_reward)

    def dense_P(self) -> np.ndarray:
        if isinstance(self.P, ProductTransitions):
            return self.P.dense()
        if sp.issparse(self.P):
            return self.P.toarray().reshape(self.n_states, self.n_actions, -1)
        return self.P

    def support(self, s: int, a: int) -> np.ndarray:
        if sp.issparse(self.P):
            row = self.P.getrow(s * self.n_actions + a)
            return row.indices[row.data > 0]
        return _support(self.P, s, a)

    def with_reward(self, R=None, next_reward=None) -> "TabularMDP":
        return replace(self, R=self.R if R is None else R,
                       next_reward=self.next_reward if next_reward is None else next_reward)

    def next_shape(self) -> Optional[tuple[int, ...]]:
        if isinstance(self.P, ProductTransitions):
            return self.P.shape
        if self.outcome_shape is not None:
            return tuple(self.outcome_shape)
        grid = self.next_grid or (self.state_grid if self.n_next == self.n_states else None)
        return grid.n_cells if grid is not None else None


def next_marginals(mdp: TabularMDP, shape: Sequence[int]) -> list[np.ndarray]:
    """Per-dimension marginals of the next-state law, each ``(S, A, n_d)``."""
    shape = tuple(int(x) for x in shape)
    if int(np.prod(shape)) != mdp.n_next:
        raise ValueError(f"next-state space of size {mdp.n_next} is not a product of {shape}")
    S, A = mdp.n_states, mdp.n_actions
    if isinstance(mdp.P, ProductTransitions):
        if mdp.P.shape != shape:
            raise ValueError("product structure does not match the requested shape")
        return [m.copy() for m in mdp.P.marginals]
    if sp.issparse(mdp.P):
        coo = mdp.P.tocoo()
        coords = np.unravel_index(coo.col, shape)
        out = []
        for d, n_d in enumerate(shape):
            m = np.zeros((S * A, n_d))
            np.add.at(m, (coo.row, coords[d]), coo.data)
            out.append(m.reshape(S, A, n_d))
        return out
    P = mdp.P.reshape(S, A, *shape)
    dims = tuple(range(2, 2 + len(shape)))
    return [P.sum(axis=tuple(x for x in dims if x != 2 + d)) for d in range(len(shape))]


def laggedize(mdp: TabularMDP, shape: Optional[Sequence[int]] = None) -> TabularMDP:
    """Replace each P[s, a] by the product of its per-dimension marginals."""
    shape = shape if shape is not None else mdp.next_shape()
    if shape is None:
        raise ValueError("laggedize needs a product-structured next-state space")
    margs = next_marginals(mdp, shape)
    return replace(mdp, P=ProductTransitions(tuple(margs)))


# --------------------------------------------------------------------------
# Value iteration and exact evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PlanResult:
    Q: np.ndarray
    V: np.ndarray
    policy: np.ndarray
    iterations: int
    residual: float


def greedy(Q: np.ndarray) -> np.ndarray:
    """Greedy actions; argmax picks the lowest index on ties."""
    return np.argmax(Q, axis=1)


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 100_000) -> PlanResult:
    """Iterate Q = r + gamma E[V(s') (1 - terminal)] until the sup-norm change is below tol."""
    r = mdp.expected_reward()
    if mdp.gamma == 0.0:
        Q = r.copy()
        return PlanResult(Q, Q.max(axis=1), greedy(Q), 1, 0.0)
    alive = ~mdp.terminal
    V = np.zeros(mdp.n_states)
    res = math.inf
    for it in range(1, max_iter + 1):
        Q = r + mdp.gamma * mdp.expect(V * alive)
        V_new = Q.max(axis=1)
        res = float(np.abs(V_new - V).max())
        V = V_new
        if res < tol:
            return PlanResult(Q, V, greedy(Q), it, res)
    raise ConvergenceError(f"value iteration did not converge in {max_iter} sweeps "
                           f"(last sup-norm change {res:.3g}, tol {tol:.3g})")


def policy_matrix(mdp: TabularMDP, policy: np.ndarray):
    """Rows P[s, policy[s]] as a (sparse or dense) ``(S, S')`` matrix."""
    S, A = mdp.n_states, mdp.n_actions
    policy = np.asarray(policy, dtype=np.int64)
    if sp.issparse(mdp.P):
        return mdp.P[np.arange(S) * A + policy]
    return mdp.dense_P()[np.arange(S), policy]


def evaluate_policy(mdp: TabularMDP, policy: np.ndarray) -> np.ndarray:
    """Exact V^pi by solving (I - gamma P_pi M) V = r_pi."""
    S = mdp.n_states
    policy = np.asarray(policy, dtype=np.int64)
    r_pi = mdp.expected_reward()[np.arange(S), policy]
    if mdp.gamma == 0.0:
        return r_pi
    P_pi = policy_matrix(mdp, policy)
    alive = (~mdp.terminal).astype(np.float64)
    if sp.issparse(P_pi):
        M = sp.identity(S, format="csr") - mdp.gamma * P_pi @ sp.diags(alive)
        return spla.spsolve(M.tocsc(), r_pi)
    return np.linalg.solve(np.eye(S) - mdp.gamma * P_pi * alive, r_pi)


def q_from_v(mdp: TabularMDP, V: np.ndarray) -> np.ndarray:
    r = mdp.expected_reward()
    if mdp.gamma == 0.0:
        return r
    return r + mdp.gamma * mdp.expect(V * ~mdp.terminal)


# --------------------------------------------------------------------------
# Discretization
# --------------------------------------------------------------------------


def discretize(env, grid: Grid, n_mc: int, rng: RngStream, *, gamma: Optional[float] = None,
               next_grid: Optional[Grid] = None, next_reward_fn: Optional[Callable] = None,
               chunk: int = 256) -> TabularMDP:
    """Monte Carlo tabular model of ``env`` from cell-center starts.

    Every action at a cell uses the same random stream (common random
    numbers), so action comparisons are not swamped by sampling noise.
    Streams are split per chunk of ``chunk`` cells.
    With ``next_reward_fn`` (a function of next states) the reward is split
    into ``R[s, a] = E[r - h(s')]`` and ``next_reward = h(cell centers)``;
    otherwise ``R`` is the sample-mean reward.  Next states falling outside
    ``next_grid`` (default ``grid``) clamp to edge cells.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    gamma = env.gamma if gamma is None else gamma
    ngrid = next_grid or grid
    if gamma > 0 and ngrid != grid:
        raise ValueError("multi-step MDPs need next_grid == grid")
    centers = grid.centers()
    S, A = grid.size, env.n_actions
    R = np.zeros((S, A))
    term_frac = np.zeros(ngrid.size)
    term_hits = np.zeros(ngrid.size)
    rows, cols = [], []
    clamped = 0
    for start in range(0, S, chunk):
        cells = np.arange(start, min(S, start + chunk))
        states = np.repeat(centers[cells], n_mc, axis=0)
        for a in range(A):
            # a fresh copy of the chunk stream per action gives common random numbers
            stream = split_rng(rng, f"chunk{start}")
            sp_, r, term = env.step_batch(states, np.full(len(states), a), stream)
            if next_reward_fn is not None:
                r = r - next_reward_fn(sp_)
            R[cells, a] = r.reshape(len(cells), n_mc).mean(axis=1)
            idx, n_cl = ngrid.index(sp_, return_clamped=True)
            clamped += n_cl
            np.add.at(term_frac, idx, term.astype(np.float64))
            np.add.at(term_hits, idx, 1.0)
            rows.append(np.repeat(cells * A + a, n_mc))
            cols.append(idx)
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    P = sp.csr_matrix((np.full(len(rows), 1.0 / n_mc), (rows, cols)), shape=(S * A, ngrid.size))
    P.sum_duplicates()
    terminal = term_hits > 0
    terminal &= term_frac >= 0.5 * term_hits
    next_reward = next_reward_fn(ngrid.centers()) if next_reward_fn is not None else None
    return TabularMDP(P, R, gamma, terminal, next_reward, grid, ngrid, clamped)


# --------------------------------------------------------------------------
# Policies and returns
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularPolicy:
    """Action per grid cell, applied to continuous states through the grid."""

    actions: np.ndarray
    grid: Grid

    def __call__(self, states, rng=None) -> np.ndarray:
        return self.actions[self.grid.index(states)]


@dataclass(frozen=True)
class EpsGreedyPolicy:
    Q: np.ndarray
    grid: Grid
    eps: float

    def __call__(self, states, rng: RngStream) -> np.ndarray:
        states = np.atleast_2d(states)
        greedy_a = greedy(self.Q)[self.grid.index(states)]
        explore = rng.random(len(states)) < self.eps
        rand_a = rng.integers(0, self.Q.shape[1], size=len(states))
        return np.where(explore, rand_a, greedy_a)


@dataclass(frozen=True)
class EpisodeStats:
    returns: np.ndarray
    lengths: np.ndarray
    final_states: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.returns.mean())

    @property
    def std(self) -> float:
        return float(self.returns.std(ddof=1)) if len(self.returns) > 1 else 0.0


def run_episodes(env, policy: Callable, n_episodes: int, gamma: float, rng: RngStream,
                 starts: Optional[np.ndarray] = None) -> EpisodeStats:
    """Batched episodes of at most ``env.max_steps`` steps."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    s = env.reset_batch(n_episodes, split_rng(rng, "reset")) if starts is None \
        else np.array(np.atleast_2d(starts), dtype=np.float64)
    n = len(s)
    ret = np.zeros(n)
    length = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    disc = 1.0
    for t in range(env.max_steps):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        step_rng = split_rng(rng, f"t{t}")
        a = np.asarray(policy(s[idx], split_rng(step_rng, "policy")), dtype=np.int64)
        sp_, r, term = env.step_batch(s[idx], a, split_rng(step_rng, "env"))
        ret[idx] += disc * r
        length[idx] += 1
        s[idx] = sp_
        alive[idx[term]] = False
        disc *= gamma
    return EpisodeStats(ret, length, s)


def policy_return(env_or_mdp, policy, n_episodes: int, gamma: float, rng: RngStream,
                  starts=None, horizon: Optional[int] = None) -> tuple[float, float]:
    """Monte Carlo mean and std of discounted returns.

    For a :class:`TabularMDP`, ``policy`` is an action per state, ``starts``
    a start distribution over states (uniform by default) and ``horizon``
    caps episode length.
    """
    if isinstance(env_or_mdp, TabularMDP):
        st = mdp_episodes(env_or_mdp, np.asarray(policy), n_episodes, gamma, rng, starts, horizon)
    else:
        st = run_episodes(env_or_mdp, policy, n_episodes, gamma, rng, starts)
    return st.mean, st.std


def mdp_episodes(mdp: TabularMDP, policy: np.ndarray, n_episodes: int, gamma: float, rng: RngStream,
                 start_dist=None, horizon: Optional[int] = None) -> EpisodeStats:
    S = mdp.n_states
    dist = np.full(S, 1.0 / S) if start_dist is None else np.asarray(start_dist, dtype=np.float64)
    horizon = horizon or (1 if mdp.gamma == 0 else 10_000)
    s = rng.choice(S, size=n_episodes, p=dist)
    r_exp = mdp.R
    P_pi = policy_matrix(mdp, policy)
    P_pi = P_pi.toarray() if sp.issparse(P_pi) else np.asarray(P_pi)
    cdf = np.cumsum(P_pi, axis=1)
    ret = np.zeros(n_episodes)
    length = np.zeros(n_episodes, dtype=np.int64)
    alive = np.ones(n_episodes, dtype=bool)
    disc = 1.0
    nr = mdp.next_reward
    for _ in range(horizon):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        a = policy[s[idx]]
        u = rng.random(len(idx))
        nxt = np.minimum((cdf[s[idx]] < u[:, None]).sum(axis=1), cdf.shape[1] - 1)
        r = r_exp[s[idx], a] + (nr[nxt] if nr is not None else 0.0)
        ret[idx] += disc * r
        length[idx] += 1
        alive[idx[mdp.terminal[nxt]]] = False
        if mdp.n_next == S:
            s[idx] = nxt
        else:
            alive[idx] = False
        disc *= gamma
    return EpisodeStats(ret, length, s)


# --------------------------------------------------------------------------
# Consistency of optimal actions
# --------------------------------------------------------------------------


def reachable_states(mdp: TabularMDP, policy: np.ndarray, starts: Sequence[int]) -> np.ndarray:
    """States reachable with positive probability under ``policy`` (support BFS)."""
    seen = np.zeros(mdp.n_states, dtype=bool)
    queue = deque(int(s) for s in starts)
    for s in queue:
        seen[s] = True
    if mdp.n_next != mdp.n_states:
        return np.flatnonzero(seen)
    while queue:
        s = queue.popleft()
        for nxt in mdp.support(s, int(policy[s])):
            if not seen[nxt] and not mdp.terminal[nxt]:
                seen[nxt] = True
                queue.append(int(nxt))
            elif mdp.terminal[nxt]:
                seen[nxt] = True
    return np.flatnonzero(seen)


def consistency_check(mdp_true: TabularMDP, mdp_lagged: TabularMDP, start_states: Sequence[int],
                      tol: float = 1e-10) -> list[tuple[int, int, int]]:
    """States visited by the true-optimal policy where the two optimal actions disagree.

    A witness ``(s, a0, a1)`` has a0 optimal under the true model and a1
    under the lagged one, with Q_true(s, a0) > Q_true(s, a1) and
    Q_lagged(s, a0) < Q_lagged(s, a1).
    """
    if mdp_true.R.shape != mdp_lagged.R.shape or mdp_true.n_next != mdp_lagged.n_next:
        raise ValueError("MDPs must share their shape")
    pt, pl = value_iteration(mdp_true), value_iteration(mdp_lagged)
    out = []
    for s in reachable_states(mdp_true, pt.policy, start_states):
        if s >= mdp_true.n_states:
            continue
        a0, a1 = int(pt.policy[s]), int(pl.policy[s])
        if a0 == a1:
            continue
        if pt.Q[s, a0] - pt.Q[s, a1] > tol and pl.Q[s, a1] - pl.Q[s, a0] > tol:
            out.append((int(s), a0, a1))
    return out


# --------------------------------------------------------------------------
# 1-D Driving divergence band
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RegionBounds:
    """Band lower < p/dt + 2v < upper where lagged and true optimal actions differ."""

    lower: float
    upper: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise ValueError("lower must not exceed upper")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, p, v, dt: float = 1.0) -> np.ndarray:
        x = np.asarray(p) / dt + 2 * np.asarray(v)
        return (x > self.lower) & (x < self.upper)

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "width": self.width}


def driving_region(params: DrivingParams) -> RegionBounds:
    d0, d1 = params.dv
    g0, g1 = params.g
    if g1 < g0:
        raise ValueError("need g(A1) >= g(A0)")
    upper = -(d1 + d0)
    lower = upper - params.sigma_v ** 2 * (g1 ** 2 - g0 ** 2) / (d1 - d0)
    return RegionBounds(float(lower), float(upper))


def driving_region_mdp(params: DrivingParams, grid: Grid, n_mc: int, rng: RngStream,
                       margin_sd: float = 5.0) -> TabularMDP:
    """Single-step appendix Driving MDP with reward p'v' - pv.

    The outcome grid keeps the state grid's cells and is extended so that
    next states within ``margin_sd`` noise standard deviations are never
    clamped.
    """
    from .envs import DrivingEnv

    p = replace(params, sign_mode="appendix", reward_mode="product")
    env = DrivingEnv(p)
    d1, g1 = max(p.dv), float(max(p.g))
    spread = margin_sd * (g1 * p.sigma_v * (1 + p.dt) + p.sigma_p)
    lo = np.asarray(grid.lows) - np.array([abs(grid.highs[1]) * p.dt + d1 * p.dt, 0.0]) - spread
    hi = np.asarray(grid.highs) + np.array([abs(grid.highs[1]) * p.dt + d1 * p.dt, d1]) + spread
    ngrid = grid.covering(lo, hi)
    return discretize(env, grid, n_mc, rng, gamma=0.0, next_grid=ngrid,
                      next_reward_fn=lambda s: s[:, 0] * s[:, 1])


def policy_map(policy, grid: Grid) -> np.ndarray:
    """Actions at cell centers of a 2-D grid, shaped ``(n_cells[0], n_cells[1])``."""
    if grid.dim != 2:
        raise ValueError("policy maps need a 2-D grid")
    if isinstance(policy, np.ndarray):
        acts = policy
    else:
        acts = np.asarray(policy(grid.centers(), None))
    return np.asarray(acts, dtype=np.int64).reshape(grid.n_cells)


def write_policy_map_csv(path, amap: np.ndarray, grid: Grid) -> None:
    """Rows are first-dimension cells; the header lists second-dimension centers."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["center"] + [f"{c:.17g}" for c in grid.axis_centers(1)])
        for c, row in zip(grid.axis_centers(0), amap):
            w.writerow([f"{c:.17g}"] + [str(int(a)) for a in row])


def region_cells(grid: Grid, bounds: RegionBounds, dt: float = 1.0):
    """Masks over a 2-D (p, v) grid: inside the band, and near a band edge.

    A cell is near an edge when a boundary line passes through its 3x3
    neighborhood.
    """
    c = grid.centers()
    x = c[:, 0] / dt + 2 * c[:, 1]
    reach = 1.5 * grid.widths[0] / dt + 3.0 * grid.widths[1]
    inside = (x > bounds.lower) & (x < bounds.upper)
    near = (np.abs(x - bounds.lower) <= reach) | (np.abs(x - bounds.upper) <= reach)
    return inside.reshape(grid.n_cells), near.reshape(grid.n_cells)


# --------------------------------------------------------------------------
# Model-based training loop
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Loop sizes and learner settings.

    Each epoch fits the model, takes ``env_steps`` (E) environment steps,
    launches ``n_rollouts`` (M) model rollouts of length ``rollout_k`` and
    applies ``q_updates`` (G) minibatch Q-learning updates on model data.
    """

    n_epochs: int = 30
    env_steps: int = 200
    n_rollouts: int = 200
    q_updates: int = 20
    rollout_k: int = 3
    branch: int = 1
    batch_size: int = 256
    init_steps: int = 500
    lr: float = 0.1
    eps_start: float = 0.5
    eps_decay: float = 0.99
    eps_min: float = 0.05
    window: int = 2000
    shrink: float = 0.05
    mean_kind: str = "linear_least_squares"
    feature_map: str = "identity"
    scale_kind: str = "homoscedastic"
    model_capacity: int = 20_000
    env_capacity: Optional[int] = None
    eval_episodes: int = 50
    q_gamma: Optional[float] = None
    grid: Grid = field(default_factory=lambda: Grid.uniform(-4.0, 4.0, 24, 2))

    def __post_init__(self):
        for name in ("n_epochs", "env_steps", "n_rollouts", "q_updates", "rollout_k", "branch",
                     "batch_size", "eval_episodes", "window"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.init_steps < 0:
            raise ValueError("init_steps must be >= 0")
        if not 0 < self.lr <= 1:
            raise ValueError("lr must lie in (0, 1]")


@dataclass
class TrainResult:
    policy: TabularPolicy
    Q: np.ndarray
    model: object
    curve: np.ndarray
    corr_history: list
    loss_history: np.ndarray
    env_data: object

    @property
    def final_return(self) -> float:
        return float(self.curve[-1, 1])


def _q_update(Q: np.ndarray, grid: Grid, batch, gamma: float, lr: float) -> None:
    s, a, s2, r, done = batch
    c, c2 = grid.index(s), grid.index(s2)
    target = r + gamma * (~done) * Q[c2].max(axis=1)
    td = target - Q[c, a]
    acc = np.zeros_like(Q)
    cnt = np.zeros_like(Q)
    np.add.at(acc, (c, a), td)
    np.add.at(cnt, (c, a), 1.0)
    hit = cnt > 0
    Q[hit] += lr * acc[hit] / cnt[hit]


def train_loop(env, cfg: TrainConfig, mode: str, rng: RngStream) -> TrainResult:
    """Dyna-style learning from model rollouts with a tabular Q policy.

    In instantaneous mode Γ is re-estimated from the standardized residuals
    of every environment step; in lagged mode it stays the identity.
    """
    from .core import Dataset
    from .models import ResidualWindow, fit_model, likelihood_loss_batch, update_corr
    from .rollout import RolloutConfig, rollout

    if mode not in ("lagged", "instantaneous"):
        raise ValueError(f"unknown mode {mode!r}")
    if cfg.grid.dim != env.dim:
        raise ValueError("Q grid dimension must match the environment")
    q_gamma = env.gamma if cfg.q_gamma is None else cfg.q_gamma
    Q = np.zeros((cfg.grid.size, env.n_actions))
    fit_kw = dict(kind=cfg.mean_kind, n_actions=env.n_actions, feature_map=cfg.feature_map,
                  scale_kind=cfg.scale_kind)

    # warm-up data from a uniform-random policy so the first fit is defined
    warm = split_rng(rng, "warmup")
    n_init = max(cfg.init_steps, env.dim + 2)
    rows = _collect(env, lambda s, g: g.integers(0, env.n_actions, size=len(s)), n_init, warm, None)
    env_data = Dataset.from_arrays(*rows[:5], capacity=cfg.env_capacity)
    state, t_ep = rows[5], rows[6]

    model_data = Dataset.empty(env.dim, "model", cfg.model_capacity)
    window = ResidualWindow(cfg.window, env.dim)
    from .core import CorrelationMatrix
    corr = CorrelationMatrix.identity(env.dim)
    curve, corr_hist, loss_hist = [], [], []
    for epoch in range(cfg.n_epochs):
        ep_rng = split_rng(rng, f"epoch{epoch}")
        model = fit_model(env_data, mode=mode, **fit_kw)
        if mode == "instantaneous":
            model = model.with_corr(corr)
        eps = max(cfg.eps_min, cfg.eps_start * cfg.eps_decay ** epoch)
        policy = EpsGreedyPolicy(Q, cfg.grid, eps)

        step_rng = split_rng(ep_rng, "env")
        S, A_, S2, R_, D_ = [], [], [], [], []
        losses = []
        for _ in range(cfg.env_steps):
            a = policy(state[None], step_rng)
            s2, r, term = env.step_batch(state[None], a, step_rng)
            mu, sc = model.predict_batch(state[None], a)
            losses.append(likelihood_loss_batch(mu, sc, model.corr, s2)[0][0])
            window.push((s2 - mu) / np.maximum(sc, 1e-6))
            if mode == "instantaneous" and len(window) >= 2 * env.dim:
                corr = update_corr(window, corr, cfg.shrink)
                model = model.with_corr(corr)
            S.append(state.copy()); A_.append(int(a[0])); S2.append(s2[0]); R_.append(float(r[0]))
            D_.append(bool(term[0]))
            t_ep += 1
            if term[0] or t_ep >= env.max_steps or not np.all(np.isfinite(s2)):
                state, t_ep = env.reset_batch(1, step_rng)[0], 0
            else:
                state = s2[0]
        env_data = env_data.extend(Dataset.from_arrays(S, A_, S2, R_, D_))
        loss_hist.append(float(np.mean(losses)))
        corr_hist.append(model.corr.entries.copy())

        pick = split_rng(ep_rng, "starts").integers(0, len(env_data), size=cfg.n_rollouts)
        starts = env_data.states[pick]
        rcfg = RolloutConfig(cfg.rollout_k, cfg.n_rollouts, cfg.branch)
        sim = rollout(model, policy, starts, rcfg, env.reward_batch, split_rng(ep_rng, "rollout"))
        model_data = model_data.extend(sim)

        q_rng = split_rng(ep_rng, "q")
        for _ in range(cfg.q_updates):
            idx = q_rng.integers(0, len(model_data), size=cfg.batch_size)
            batch = (model_data.states[idx], model_data.actions[idx], model_data.next_states[idx],
                     model_data.rewards[idx], model_data.terminals[idx])
            _q_update(Q, cfg.grid, batch, q_gamma, cfg.lr)

        greedy_policy = TabularPolicy(greedy(Q), cfg.grid)
        st = run_episodes(env, greedy_policy, cfg.eval_episodes, env.gamma, split_rng(rng, f"eval{epoch}"))
        curve.append((epoch, st.mean, st.std))

    final = fit_model(env_data, mode=mode, **fit_kw)
    if mode == "instantaneous":
        final = final.with_corr(corr)
    return TrainResult(TabularPolicy(greedy(Q), cfg.grid), Q, final, np.array(curve, dtype=np.float64),
                       corr_hist, np.array(loss_hist), env_data)


def _collect(env, policy, n: int, rng: RngStream, state=None):
    """Roll a single episode stream for ``n`` steps, resetting at episode ends."""
    s = env.reset_batch(1, rng)[0] if state is None else state
    t = 0
    rows = ([], [], [], [], [])
    for _ in range(n):
        a = np.asarray(policy(s[None], rng), dtype=np.int64)
        s2, r, term = env.step_batch(s[None], a, rng)
        for col, val in zip(rows, (s.copy(), int(a[0]), s2[0], float(r[0]), bool(term[0]))):
            col.append(val)
        t += 1
        if term[0] or t >= env.max_steps or not np.all(np.isfinite(s2)):
            s, t = env.reset_batch(1, rng)[0], 0
        else:
            s = s2[0]
    return (*rows, s, t)
