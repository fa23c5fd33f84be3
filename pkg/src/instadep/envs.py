"""Ground-truth stochastic environments with instantaneous dependence.

Every environment exposes the same batch interface, used by rollouts,
discretization and evaluation alike:

``reset_batch(n, rng)``
    ``(n, dim)`` start states.
``transition_batch(states, actions, rng)``
    sampled next states.
``reward_batch(states, actions, next_states)``
    ``(rewards, terminals)``; the step budget is handled by the caller.
``step_batch(states, actions, rng)``
    both of the above.

plus the attributes ``dim``, ``n_actions``, ``max_steps`` and ``gamma``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .core import RngStream, state_vec

Pair = tuple[int, int]


# --------------------------------------------------------------------------
# 1-D Driving
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DrivingParams:
    """Car on a line, state (p, v), two acceleration actions.

    Defaults are the published task parameters; ``sigma_p`` is not given
    there and defaults to 0.
    """

    dv: tuple[float, float] = (0.1, 1.0)
    dt: float = 1.0
    sigma_v: float = 1.0
    sigma_p: float = 0.0
    g_ratio: float = 0.1
    goal_radius: float = 0.1
    step_penalty: float = -1.0
    max_steps: int = 200
    discount: float = 1.0
    sign_mode: str = "main_text"
    reward_mode: str = "penalty"
    start_bound: float = 2.0

    def __post_init__(self):
        dv = tuple(float(x) for x in self.dv)
        object.__setattr__(self, "dv", dv)
        if not dv[1] > dv[0] > 0:
            raise ValueError("need dv[1] > dv[0] > 0")
        if self.dt <= 0 or self.sigma_v < 0 or self.sigma_p < 0 or self.g_ratio < 0:
            raise ValueError("dt must be positive; sigma_v, sigma_p, g_ratio nonnegative")
        if self.goal_radius <= 0:
            raise ValueError("goal_radius must be positive")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError("discount must lie in [0, 1]")
        if self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.sign_mode not in ("main_text", "appendix"):
            raise ValueError(f"unknown sign_mode {self.sign_mode!r}")
        if self.reward_mode not in ("penalty", "product", "quadratic"):
            raise ValueError(f"unknown reward_mode {self.reward_mode!r}")

    @property
    def g(self) -> np.ndarray:
        """Noise magnitude g(A_i) for each action."""
        return self.g_ratio * np.asarray(self.dv)


def _sign(p: np.ndarray) -> np.ndarray:
    # sign(0) = +1 keeps the -p/|p| factor defined at the origin
    return np.where(p >= 0, 1.0, -1.0)


def driving_mean_batch(params: DrivingParams, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Noise-free part of the Driving transition."""
    states = np.asarray(states, dtype=np.float64)
    p, v = states[:, 0], states[:, 1]
    dv = np.asarray(params.dv)[np.asarray(actions)]
    c = -_sign(p) if params.sign_mode == "main_text" else 1.0
    v_next = v + c * dv
    return np.stack([p + v_next * params.dt, v_next], axis=1)


def driving_transition_batch(params: DrivingParams, states, actions, rng: RngStream) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions)
    n = len(states)
    eps_v = rng.standard_normal(n) * params.sigma_v
    eps_p = rng.standard_normal(n) * params.sigma_p
    out = driving_mean_batch(params, states, actions)
    kick = params.g[actions] * eps_v
    out[:, 1] += kick
    out[:, 0] += kick * params.dt + eps_p
    return out


def driving_potential(params: DrivingParams, states: np.ndarray) -> np.ndarray:
    """State potential whose difference is the reward in product/quadratic modes."""
    states = np.asarray(states, dtype=np.float64)
    p, v = states[..., 0], states[..., 1]
    if params.reward_mode == "product":
        return p * v
    if params.reward_mode == "quadratic":
        return -(np.abs(p) + np.abs(v)) ** 2
    return np.zeros_like(p)


def driving_reward_batch(params: DrivingParams, states, actions, next_states):
    states = np.asarray(states, dtype=np.float64)
    next_states = np.asarray(next_states, dtype=np.float64)
    terminal = np.hypot(next_states[:, 0], next_states[:, 1]) < params.goal_radius
    if params.reward_mode == "penalty":
        reward = np.full(len(states), float(params.step_penalty))
    else:
        reward = driving_potential(params, next_states) - driving_potential(params, states)
    return reward, terminal


def driving_step(params: DrivingParams, s, a: int, rng: RngStream, t: int = 0):
    """One Driving step from ``s = (p, v)``; ``t`` is the index of this step in the episode.

    Returns ``(next_state, reward, terminal)``; terminal when the car enters
    the goal disk or the step budget is exhausted.
    """
    s = state_vec(s, 2)
    if a not in (0, 1):
        raise ValueError(f"action must be 0 or 1, got {a}")
    sp = driving_transition_batch(params, s[None], np.array([a]), rng)
    r, term = driving_reward_batch(params, s[None], np.array([a]), sp)
    done = bool(term[0]) or t + 1 >= params.max_steps
    return sp[0], float(r[0]), done


@dataclass(frozen=True)
class DrivingEnv:
    params: DrivingParams = field(default_factory=DrivingParams)
    dim: int = 2
    n_actions: int = 2

    @property
    def max_steps(self) -> int:
        return self.params.max_steps

    @property
    def gamma(self) -> float:
        return self.params.discount

    def reset_batch(self, n: int, rng: RngStream) -> np.ndarray:
        b = self.params.start_bound
        return rng.uniform(-b, b, size=(n, 2))

    def mean_batch(self, states, actions) -> np.ndarray:
        return driving_mean_batch(self.params, states, actions)

    def transition_batch(self, states, actions, rng: RngStream) -> np.ndarray:
        return driving_transition_batch(self.params, states, actions, rng)

    def reward_batch(self, states, actions, next_states):
        return driving_reward_batch(self.params, states, actions, next_states)

    def step_batch(self, states, actions, rng: RngStream):
        sp = self.transition_batch(states, actions, rng)
        r, term = self.reward_batch(states, actions, sp)
        return sp, r, term

    def features(self, states: np.ndarray) -> np.ndarray:
        """Regression features under which the mean transition is exactly linear."""
        states = np.atleast_2d(states)
        if self.params.sign_mode == "main_text":
            return np.column_stack([states, _sign(states[:, 0])])
        return states


# --------------------------------------------------------------------------
# Noise injection and reward augmentation
# --------------------------------------------------------------------------


def pair_correlation(n: int, pairs: Sequence[Pair], corr: float | Sequence[float]) -> np.ndarray:
    """Identity correlation with ``corr`` placed on each designated pair."""
    corrs = np.broadcast_to(np.asarray(corr, dtype=np.float64), (len(pairs),))
    m = np.eye(n)
    for (i, j), c in zip(pairs, corrs):
        if i == j:
            raise ValueError("pair indices must differ")
        m[i, j] = m[j, i] = c
    return m


@dataclass(frozen=True)
class NoiseInjectConfig:
    """State-proportional Gaussian noise, correlated on the designated pairs."""

    r_noise: float = 0.4
    pair_corr: float = 0.9
    pairs: tuple[Pair, ...] = ((0, 1),)

    def __post_init__(self):
        if self.r_noise < 0:
            raise ValueError("r_noise must be nonnegative")
        if not abs(self.pair_corr) < 1:
            raise ValueError("|pair_corr| must be < 1")
        pairs = tuple((int(i), int(j)) for i, j in self.pairs)
        flat = [k for p in pairs for k in p]
        if len(set(flat)) != len(flat):
            raise ValueError("designated pairs must be disjoint")
        object.__setattr__(self, "pairs", pairs)

    def correlation(self, n: int) -> np.ndarray:
        return pair_correlation(n, self.pairs, self.pair_corr)


def wrap_noise_inject(base_next, prev, cfg: NoiseInjectConfig, rng: RngStream) -> np.ndarray:
    """Add zero-mean noise with Var(e_i) = r_noise * |base_next_i - prev_i|.

    Accepts single states or ``(n, dim)`` batches.
    """
    base_next = np.asarray(base_next, dtype=np.float64)
    prev = np.asarray(prev, dtype=np.float64)
    if base_next.shape != prev.shape:
        raise ValueError("base_next and prev must have the same shape")
    single = base_next.ndim == 1
    bn, pv = np.atleast_2d(base_next), np.atleast_2d(prev)
    n = bn.shape[1]
    L = np.linalg.cholesky(cfg.correlation(n))
    z = rng.standard_normal(bn.shape) @ L.T
    scale = np.sqrt(cfg.r_noise * np.abs(bn - pv))
    out = bn + scale * z
    return out[0] if single else out


@dataclass(frozen=True)
class RewardAugmentConfig:
    """Extra reward r_reward * mean_pairs Norm((s_i + s_j)^2)."""

    r_reward: float = -5.0
    pairs: tuple[Pair, ...] = ((0, 1),)
    norm_bounds: tuple[tuple[float, float], ...] = ((0.0, 1.0),)

    def __post_init__(self):
        pairs = tuple((int(i), int(j)) for i, j in self.pairs)
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.norm_bounds)
        if len(bounds) != len(pairs):
            raise ValueError("need one (lo, hi) per pair")
        if any(hi <= lo for lo, hi in bounds):
            raise ValueError("each norm bound needs hi > lo")
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "norm_bounds", bounds)


def pair_norm(s_next: np.ndarray, pairs: Sequence[Pair], bounds) -> np.ndarray:
    """Per-pair Norm((s_i + s_j)^2) in [0, 1]; shape ``(..., n_pairs)``."""
    s_next = np.asarray(s_next, dtype=np.float64)
    cols = []
    for (i, j), (lo, hi) in zip(pairs, bounds):
        q = (s_next[..., i] + s_next[..., j]) ** 2
        cols.append(np.clip((q - lo) / (hi - lo), 0.0, 1.0))
    return np.stack(cols, axis=-1)


def wrap_reward_augment(base_r, s_next, cfg: RewardAugmentConfig):
    if cfg.r_reward == 0 or not cfg.pairs:
        return base_r
    extra = pair_norm(s_next, cfg.pairs, cfg.norm_bounds).mean(axis=-1)
    out = np.asarray(base_r, dtype=np.float64) + cfg.r_reward * extra
    return float(out) if out.ndim == 0 else out


def calibrate_norm_bounds(env, pairs: Sequence[Pair], rng: RngStream, n_steps: int = 10_000,
                          q: tuple[float, float] = (1.0, 99.0)) -> tuple[tuple[float, float], ...]:
    """Percentile bounds of (s_i + s_j)^2 over a uniform-random-policy rollout."""
    visited = random_policy_states(env, n_steps, rng)
    out = []
    for i, j in pairs:
        vals = (visited[:, i] + visited[:, j]) ** 2
        lo, hi = np.percentile(vals, q)
        if hi <= lo:
            hi = lo + 1e-12
        out.append((float(lo), float(hi)))
    return tuple(out)


def random_policy_states(env, n_steps: int, rng: RngStream) -> np.ndarray:
    """Next states visited by a uniform-random policy over ``n_steps`` steps."""
    s = env.reset_batch(1, rng)
    t = 0
    out = np.empty((n_steps, env.dim))
    for k in range(n_steps):
        a = rng.integers(0, env.n_actions, size=1)
        sp, _, term = env.step_batch(s, a, rng)
        out[k] = sp[0]
        t += 1
        if term[0] or t >= env.max_steps or not np.all(np.isfinite(sp)):
            s, t = env.reset_batch(1, rng), 0
        else:
            s = sp
    return out


@dataclass(frozen=True)
class NoisyEnv:
    """Base environment plus injected correlated noise and/or reward augmentation."""

    base: object
    noise: Optional[NoiseInjectConfig] = None
    augment: Optional[RewardAugmentConfig] = None

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def n_actions(self) -> int:
        return self.base.n_actions

    @property
    def max_steps(self) -> int:
        return self.base.max_steps

    @property
    def gamma(self) -> float:
        return self.base.gamma

    def reset_batch(self, n, rng):
        return self.base.reset_batch(n, rng)

    def features(self, states):
        return self.base.features(states)

    def transition_batch(self, states, actions, rng):
        base_next = self.base.transition_batch(states, actions, rng)
        if self.noise is None or self.noise.r_noise == 0:
            return base_next
        return wrap_noise_inject(base_next, np.asarray(states, dtype=np.float64), self.noise, rng)

    def reward_batch(self, states, actions, next_states):
        r, term = self.base.reward_batch(states, actions, next_states)
        if self.augment is not None:
            r = wrap_reward_augment(r, next_states, self.augment)
        return r, term

    def step_batch(self, states, actions, rng):
        sp = self.transition_batch(states, actions, rng)
        r, term = self.reward_batch(states, actions, sp)
        return sp, r, term


# --------------------------------------------------------------------------
# CartPoleLite with reward families
# --------------------------------------------------------------------------

FAMILY_TAGS = ("Original", "A", "B", "C", "D", "E")


@dataclass(frozen=True)
class RewardFamily:
    """Extra reward term attached to CartPoleLite.

    ``dims`` holds (i,) for A, (i, j) for B/C/E and (i, j, k, m) for D.
    ``noise_pairs`` are the dimension pairs whose injected noise is
    correlated; ``corr_override`` replaces the config's pair correlation.
    """

    tag: str = "Original"
    dims: tuple[int, ...] = ()
    noise_pairs: tuple[Pair, ...] = ((2, 3),)
    corr_override: Optional[float] = None

    def __post_init__(self):
        if self.tag not in FAMILY_TAGS:
            raise ValueError(f"unknown reward family {self.tag!r}")
        need = {"Original": 0, "A": 1, "B": 2, "C": 2, "D": 4, "E": 2}[self.tag]
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != need:
            raise ValueError(f"family {self.tag} needs {need} dims, got {dims}")
        if len(set(dims)) != len(dims):
            raise ValueError("family dims must be distinct")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "noise_pairs", tuple((int(i), int(j)) for i, j in self.noise_pairs))
        dep = {frozenset(p) for p in self.noise_pairs}
        for pair in self.reward_pairs:
            if self.tag == "B" and frozenset(pair) in dep:
                raise ValueError("family B needs a pair with independent noise")
            if self.tag in ("C", "D", "E") and frozenset(pair) not in dep:
                raise ValueError(f"family {self.tag} needs its pairs to carry dependent noise")

    @property
    def reward_pairs(self) -> tuple[Pair, ...]:
        d = self.dims
        if self.tag in ("B", "C", "E"):
            return ((d[0], d[1]),)
        if self.tag == "D":
            return ((d[0], d[1]), (d[2], d[3]))
        return ()

    def quadratics(self, states: np.ndarray) -> np.ndarray:
        """Raw nonnegative quantities penalised by the family, shape ``(n, n_terms)``."""
        states = np.atleast_2d(states)
        if self.tag == "A":
            return states[:, [self.dims[0]]] ** 2
        cols = [(states[:, i] + states[:, j]) ** 2 for i, j in self.reward_pairs]
        return np.stack(cols, axis=1) if cols else np.zeros((len(states), 0))


def reward_family(tag: str, dep: Pair = (2, 3), second: Pair = (0, 1),
                  indep: Pair = (0, 2)) -> RewardFamily:
    """Standard family layout.

    ``dep`` is the environment's dependent-noise pair, ``second`` the extra
    dependent pair of family D and ``indep`` the independent pair of B.
    """
    if tag == "Original":
        return RewardFamily("Original", (), (dep,))
    if tag == "A":
        return RewardFamily("A", (dep[0],), (dep,))
    if tag == "B":
        return RewardFamily("B", indep, (dep,))
    if tag == "C":
        return RewardFamily("C", dep, (dep,))
    if tag == "D":
        return RewardFamily("D", dep + second, (dep, second))
    if tag == "E":
        return RewardFamily("E", dep, (dep,), corr_override=0.9)
    raise ValueError(f"unknown reward family {tag!r}")


@dataclass(frozen=True)
class CartPoleParams:
    gravity: float = 9.8
    masscart: float = 1.0
    masspole: float = 0.1
    length: float = 0.5
    force_mag: float = 10.0
    tau: float = 0.02
    theta_limit: float = 12 * 2 * math.pi / 360
    x_limit: float = 2.4
    max_steps: int = 200
    discount: float = 0.99


def cartpole_mean_batch(params: CartPoleParams, states, actions) -> np.ndarray:
    """Explicit-Euler cart-pole step (noise free)."""
    states = np.asarray(states, dtype=np.float64)
    x, x_dot, theta, theta_dot = states.T
    force = np.where(np.asarray(actions) == 1, params.force_mag, -params.force_mag)
    total_mass = params.masspole + params.masscart
    pml = params.masspole * params.length
    cos, sin = np.cos(theta), np.sin(theta)
    temp = (force + pml * theta_dot ** 2 * sin) / total_mass
    theta_acc = (params.gravity * sin - cos * temp) / (
        params.length * (4.0 / 3.0 - params.masspole * cos ** 2 / total_mass))
    x_acc = temp - pml * theta_acc * cos / total_mass
    tau = params.tau
    return np.stack([x + tau * x_dot, x_dot + tau * x_acc,
                     theta + tau * theta_dot, theta_dot + tau * theta_acc], axis=1)


def family_term(family: RewardFamily, states, bounds) -> np.ndarray:
    """Normalised family reward term in [-1, 0]; 0 at the upright rest state."""
    if family.tag == "Original":
        return np.zeros(len(np.atleast_2d(states)))
    q = family.quadratics(states)
    lo, hi = np.asarray(bounds, dtype=np.float64).T
    return -np.clip((q - lo) / (hi - lo), 0.0, 1.0).mean(axis=1)


@dataclass(frozen=True)
class CartPoleLite:
    """Two-action cart-pole with injected correlated noise and a family reward term.

    ``term_bounds`` holds one (lo, hi) Norm bound per family term (see
    :func:`calibrate_family_bounds`).
    """

    family: RewardFamily = field(default_factory=lambda: reward_family("Original"))
    noise: NoiseInjectConfig = field(default_factory=lambda: NoiseInjectConfig(0.01, 0.5, ((2, 3),)))
    params: CartPoleParams = field(default_factory=CartPoleParams)
    term_bounds: tuple[tuple[float, float], ...] = ()
    start_bound: float = 0.05
    dim: int = 4
    n_actions: int = 2

    def __post_init__(self):
        n_terms = {"Original": 0, "A": 1, "D": 2}.get(self.family.tag, 1)
        if len(self.term_bounds) != n_terms:
            if self.term_bounds:
                raise ValueError(f"family {self.family.tag} needs {n_terms} term bounds")
            object.__setattr__(self, "term_bounds", ((0.0, 1.0),) * n_terms)
        if any(hi <= lo for lo, hi in self.term_bounds):
            raise ValueError("each term bound needs hi > lo")

    @property
    def noise_config(self) -> NoiseInjectConfig:
        corr = self.family.corr_override if self.family.corr_override is not None \
            else self.noise.pair_corr
        return replace(self.noise, pairs=self.family.noise_pairs, pair_corr=corr)

    @property
    def max_steps(self) -> int:
        return self.params.max_steps

    @property
    def gamma(self) -> float:
        return self.params.discount

    def reset_batch(self, n, rng):
        return rng.uniform(-self.start_bound, self.start_bound, size=(n, 4))

    def features(self, states):
        return np.atleast_2d(states)

    def mean_batch(self, states, actions):
        return cartpole_mean_batch(self.params, states, actions)

    def transition_batch(self, states, actions, rng):
        states = np.asarray(states, dtype=np.float64)
        base_next = cartpole_mean_batch(self.params, states, actions)
        cfg = self.noise_config
        if cfg.r_noise == 0:
            return base_next
        return wrap_noise_inject(base_next, states, cfg, rng)

    def reward_batch(self, states, actions, next_states):
        next_states = np.atleast_2d(np.asarray(next_states, dtype=np.float64))
        finite = np.all(np.isfinite(next_states), axis=1)
        safe = np.where(finite[:, None], next_states, 0.0)
        out = (np.abs(safe[:, 0]) > self.params.x_limit) | (np.abs(safe[:, 2]) > self.params.theta_limit)
        term = out | ~finite
        reward = 1.0 + family_term(self.family, safe, self.term_bounds)
        return reward, term

    def step_batch(self, states, actions, rng):
        sp = self.transition_batch(states, actions, rng)
        r, term = self.reward_batch(states, actions, sp)
        return sp, r, term


def calibrate_family_bounds(env: CartPoleLite, rng: RngStream, n_steps: int = 10_000,
                            q: tuple[float, float] = (1.0, 99.0)):
    """Freeze Norm bounds for the family terms from a random-policy rollout."""
    if env.family.tag == "Original":
        return ()
    visited = random_policy_states(env, n_steps, rng)
    vals = env.family.quadratics(visited)
    lo, hi = np.percentile(vals, q, axis=0)
    return tuple((float(a), float(max(b, a + 1e-12))) for a, b in zip(lo, hi))


def cartpole_lite_step(s, a: int, family: RewardFamily, cfg: NoiseInjectConfig, rng: RngStream,
                       params: CartPoleParams = CartPoleParams(), term_bounds=()):
    """Single CartPoleLite step; returns ``(next_state, reward, terminal)``."""
    env = CartPoleLite(family, cfg, params, tuple(term_bounds))
    s = state_vec(s, 4)
    sp, r, term = env.step_batch(s[None], np.array([a]), rng)
    return sp[0], float(r[0]), bool(term[0])


# --------------------------------------------------------------------------
# Linear-Gaussian processes observed at lower resolution
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearGaussianSpec:
    """s_{t+1} = A s_t + eps, eps ~ N(0, noise_cov), observed every k steps or k-averaged."""

    A: np.ndarray
    noise_cov: np.ndarray
    k: int = 1

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        S = np.array(self.noise_cov, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or S.shape != A.shape:
            raise ValueError("A and noise_cov must be square with matching shape")
        if not np.allclose(S, S.T) or np.linalg.eigvalsh(0.5 * (S + S.T)).min() < -1e-12:
            raise ValueError("noise_cov must be symmetric PSD")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "noise_cov", S)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    @property
    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.A)).max())

    @property
    def coarse_transition(self) -> np.ndarray:
        return np.linalg.matrix_power(self.A, self.k)


def subsampled_noise_cov(spec: LinearGaussianSpec) -> np.ndarray:
    """Covariance of sum_{l<k} A^l eps, the noise seen when keeping every k-th state."""
    A, S = spec.A, spec.noise_cov
    out = np.zeros_like(S)
    Al = np.eye(spec.dim)
    for _ in range(spec.k):
        out += Al @ S @ Al.T
        Al = A @ Al
    return 0.5 * (out + out.T)


def aggregated_noise_cov(spec: LinearGaussianSpec) -> np.ndarray:
    """Covariance of the compound noise when k consecutive states are averaged."""
    A, S, k, n = spec.A, spec.noise_cov, spec.k, spec.dim
    powers = [np.linalg.matrix_power(A, i) for i in range(k)]
    out = np.zeros_like(S)
    for m in range(k):
        B = sum(powers[: m + 1], np.zeros((n, n)))
        out += B @ S @ B.T
    for m in range(1, k):
        C = sum(powers[m:], np.zeros((n, n)))
        out += C @ S @ C.T
    out /= k ** 2
    return 0.5 * (out + out.T)


def simulate_compound_noise(spec: LinearGaussianSpec, mode: str, n: int, rng: RngStream) -> np.ndarray:
    """Sample the coarse-resolution noise by running the fine process.

    Each sample runs 2k fine steps from the origin, forms two coarse
    observations (subsampled or averaged) and returns
    ``obs_2 - A^k obs_1``.  Returns ``(n, dim)``.
    """
    if mode not in ("subsample", "aggregate"):
        raise ValueError(f"unknown mode {mode!r}")
    k, d = spec.k, spec.dim
    L = _psd_factor(spec.noise_cov)
    eps = rng.standard_normal((2 * k, n, d)) @ L.T
    traj = np.empty((2 * k + 1, n, d))
    traj[0] = 0.0
    for t in range(2 * k):
        traj[t + 1] = traj[t] @ spec.A.T + eps[t]
    if mode == "subsample":
        first, second = traj[1], traj[1 + k]
    else:
        first, second = traj[1:k + 1].mean(axis=0), traj[k + 1:2 * k + 1].mean(axis=0)
    return second - first @ spec.coarse_transition.T


def _psd_factor(S: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(S)
    return v * np.sqrt(np.clip(w, 0, None))
