"""Numerical checks of when lagged models misrank actions.

Continuous side: quadratic test functions, their split into constant,
single-dimension, independent-pair and dependent-pair parts, and Monte
Carlo / closed-form gaps between a correlated Gaussian and its lagged
(diagonal) counterpart.

Tabular side: the advantages α and β on tabular MDPs, their symmetries,
the reward construction that forces a lagged model to misrank two
actions, and the factored-transition regime where β vanishes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import RngStream, split_rng
from .planning import ProductTransitions, TabularMDP, laggedize, next_marginals, value_iteration

EXACT_TOL = 1e-12


# --------------------------------------------------------------------------
# Quadratic functions and their decomposition
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QuadraticFunction:
    """F(s) = sᵀAs + bᵀs + c with A symmetrized on construction."""

    A: np.ndarray
    b: Optional[np.ndarray] = None
    c: float = 0.0

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        b = np.zeros(len(A)) if self.b is None else np.array(self.b, dtype=np.float64).reshape(len(A))
        object.__setattr__(self, "A", 0.5 * (A + A.T))
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))

    @property
    def n(self) -> int:
        return len(self.A)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return np.einsum("...i,ij,...j->...", X, self.A, X) + X @ self.b + self.c

    def __add__(self, other: "QuadraticFunction") -> "QuadraticFunction":
        return QuadraticFunction(self.A + other.A, self.b + other.b, self.c + other.c)

    def __neg__(self) -> "QuadraticFunction":
        return QuadraticFunction(-self.A, -self.b, -self.c)


@dataclass(frozen=True)
class DepStructure:
    """Unordered index pairs declared instantaneously dependent."""

    pairs: frozenset
    n: int

    def __init__(self, pairs: Sequence[Sequence[int]], n: int):
        norm = set()
        for p in pairs:
            i, j = (int(x) for x in p)
            if i == j or not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"invalid pair {p} for n = {n}")
            norm.add((min(i, j), max(i, j)))
        object.__setattr__(self, "pairs", frozenset(norm))
        object.__setattr__(self, "n", int(n))

    def dependent(self, i: int, j: int) -> bool:
        return (min(i, j), max(i, j)) in self.pairs


@dataclass(frozen=True)
class GDecomposition:
    """F = constant + singles + dependent cross terms + independent cross terms.

    ``dep_terms[(i, j)]`` and ``indep_terms[(i, j)]`` hold the coefficient
    2 A_ij of s_i s_j.
    """

    constant: float
    single_quad: np.ndarray
    single_lin: np.ndarray
    dep_terms: dict
    indep_terms: dict

    @property
    def n(self) -> int:
        return len(self.single_quad)

    def _cross(self, terms: dict) -> QuadraticFunction:
        A = np.zeros((self.n, self.n))
        for (i, j), coef in terms.items():
            A[i, j] = A[j, i] = coef / 2
        return QuadraticFunction(A)

    def g_function(self) -> QuadraticFunction:
        """G_F: the dependent-pair cross terms."""
        return self._cross(self.dep_terms)

    def h_function(self) -> QuadraticFunction:
        return self._cross(self.indep_terms)

    def singles_function(self) -> QuadraticFunction:
        return QuadraticFunction(np.diag(self.single_quad), self.single_lin)

    def g_is_zero(self) -> bool:
        return all(c == 0 for c in self.dep_terms.values())

    def evaluate_parts(self, X) -> dict:
        X = np.asarray(X, dtype=np.float64)
        return {"constant": np.full(X.shape[:-1], self.constant),
                "singles": self.singles_function()(X),
                "dep": self.g_function()(X),
                "indep": self.h_function()(X)}


def g_decompose(F: QuadraticFunction, dep: DepStructure) -> GDecomposition:
    if dep.n != F.n:
        raise ValueError("dependency structure size does not match F")
    dep_terms, indep_terms = {}, {}
    for i, j in itertools.combinations(range(F.n), 2):
        coef = 2 * F.A[i, j]
        if coef == 0:
            continue
        (dep_terms if dep.dependent(i, j) else indep_terms)[(i, j)] = coef
    return GDecomposition(F.c, np.diag(F.A).copy(), F.b.copy(), dep_terms, indep_terms)


# --------------------------------------------------------------------------
# Gaussian samplers and integral gaps
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianSampler:
    """N(mean, cov) sampled as mean + L z with a lower-triangular factor L.

    Two samplers drawing from copies of the same stream share z, which
    gives paired (common random number) comparisons.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        cov = np.array(self.cov, dtype=np.float64)
        if cov.shape != (len(mean), len(mean)) or not np.allclose(cov, cov.T):
            raise ValueError("cov must be symmetric and match the mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", 0.5 * (cov + cov.T))

    @property
    def factor(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError:
            w, v = np.linalg.eigh(self.cov)
            if w.min() < -1e-12:
                raise ValueError("cov is not PSD")
            # QR of the symmetric root gives a triangular factor with the same product
            root = v * np.sqrt(np.clip(w, 0, None))
            r = np.linalg.qr(root.T, mode="r")
            return r.T

    def lagged(self) -> "GaussianSampler":
        """Same marginals, independent dimensions."""
        return GaussianSampler(self.mean, np.diag(np.diag(self.cov)))

    def sample(self, n: int, rng: RngStream) -> np.ndarray:
        z = rng.standard_normal((n, len(self.mean)))
        return self.mean + z @ self.factor.T


@dataclass(frozen=True)
class GapEstimate:
    estimate: float
    std_err: float

    def __iter__(self):
        return iter((self.estimate, self.std_err))

    def within(self, target: float, n_se: float = 4.0) -> bool:
        return abs(self.estimate - target) <= n_se * self.std_err


def _paired_draws(P_sampler, Phat_sampler, n_mc: int, rng: RngStream):
    stream = split_rng(rng, "paired")
    X = P_sampler.sample(n_mc, RngStream(stream.seed, stream.path))
    Xh = Phat_sampler.sample(n_mc, RngStream(stream.seed, stream.path))
    return X, Xh


def _mean_se(d: np.ndarray) -> GapEstimate:
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else float("inf")
    return GapEstimate(float(d.mean()), se)


def mc_integral_gap(P_sampler, Phat_sampler, F, n_mc: int, rng: RngStream,
                    paired: bool = True) -> GapEstimate:
    """Monte Carlo estimate of ∫(P - P̂)F and its standard error.

    Paired draws share the underlying normals (common random numbers);
    unpaired draws use independent streams and the combined error
    sqrt(se_P^2 + se_P̂^2).
    """
    if paired:
        X, Xh = _paired_draws(P_sampler, Phat_sampler, n_mc, rng)
        return _mean_se(np.asarray(F(X), dtype=np.float64) - np.asarray(F(Xh), dtype=np.float64))
    left = _mean_se(np.asarray(F(P_sampler.sample(n_mc, split_rng(rng, "P"))), dtype=np.float64))
    right = _mean_se(np.asarray(F(Phat_sampler.sample(n_mc, split_rng(rng, "Phat"))), dtype=np.float64))
    return GapEstimate(left.estimate - right.estimate, float(np.hypot(left.std_err, right.std_err)))


def gaussian_quadratic_expectation(mu, cov, A) -> float:
    """E[xᵀAx] = μᵀAμ + Tr(AΣ) for x ~ N(μ, Σ)."""
    mu = np.asarray(mu, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64)
    return float(mu @ A @ mu + np.trace(A @ np.asarray(cov, dtype=np.float64)))


def gaussian_expectation(F: QuadraticFunction, sampler: GaussianSampler) -> float:
    return gaussian_quadratic_expectation(sampler.mean, sampler.cov, F.A) + float(F.b @ sampler.mean) + F.c


def closed_form_gap(P_sampler: GaussianSampler, Phat_sampler: GaussianSampler, F: QuadraticFunction) -> float:
    """∫(P - P̂)F exactly: only Tr(A(Σ - Σ̂)) survives when means agree."""
    dcov = P_sampler.cov - Phat_sampler.cov
    dmean = P_sampler.mean @ F.A @ P_sampler.mean - Phat_sampler.mean @ F.A @ Phat_sampler.mean
    return float(np.trace(F.A @ dcov) + dmean + F.b @ (P_sampler.mean - Phat_sampler.mean))


@dataclass(frozen=True)
class GVCheck:
    lhs: GapEstimate
    rhs: GapEstimate
    diff_se: float
    agree: bool
    closed_lhs: Optional[float] = None
    closed_rhs: Optional[float] = None
    closed_agree: Optional[bool] = None


def theorem_gv_check(P_sampler, Phat_sampler, F: QuadraticFunction, dep: DepStructure, n_mc: int,
                     rng: RngStream) -> GVCheck:
    """Compare the gap of F with the gap of its dependent part G_F."""
    G = g_decompose(F, dep).g_function()
    X, Xh = _paired_draws(P_sampler, Phat_sampler, n_mc, rng)
    dF = F(X) - F(Xh)
    dG = G(X) - G(Xh)
    lhs, rhs, between = _mean_se(dF), _mean_se(dG), _mean_se(dF - dG)
    agree = abs(lhs.estimate - rhs.estimate) <= 4 * between.std_err
    out = dict(lhs=lhs, rhs=rhs, diff_se=between.std_err, agree=bool(agree))
    if isinstance(P_sampler, GaussianSampler) and isinstance(Phat_sampler, GaussianSampler):
        cl, cr = closed_form_gap(P_sampler, Phat_sampler, F), closed_form_gap(P_sampler, Phat_sampler, G)
        out.update(closed_lhs=cl, closed_rhs=cr, closed_agree=abs(cl - cr) <= 1e-9)
    return GVCheck(**out)


def corollary_suite(rho: float = 0.9, scales=(1.0, 1.0), mean=(0.0, 0.0), n_mc: int = 1_000_000,
                    rng: Optional[RngStream] = None, paired: bool = False) -> dict:
    """Integral gaps for the four test-function classes on a correlated pair.

    The pair (0, 1) carries correlation ``rho``; a third, independent unit
    dimension supplies the independent pair (0, 2).  Unpaired draws are
    the default: with shared normals and a triangular factor, dimensions 0
    and 2 coincide exactly across the two laws and the check would be
    vacuous.
    """
    rng = rng if rng is not None else RngStream(0)
    s0, s1 = scales
    cov = np.array([[s0 ** 2, rho * s0 * s1, 0.0], [rho * s0 * s1, s1 ** 2, 0.0], [0.0, 0.0, 1.0]])
    P = GaussianSampler(np.array([*mean, 0.0]), cov)
    Ph = P.lagged()
    tests = {
        "constant": (lambda X: np.full(len(X), 3.7), 0.0),
        "single_dim": (lambda X: X[:, 1] ** 3 - 2 * X[:, 1] ** 2 + X[:, 1], 0.0),
        "independent_pair": (lambda X: np.sin(X[:, 0]) * X[:, 2] ** 2 + X[:, 0] * X[:, 2], 0.0),
        "dependent_cross": (lambda X: X[:, 0] * X[:, 1], rho * s0 * s1),
    }
    out = {}
    for name, (f, target) in tests.items():
        est = mc_integral_gap(P, Ph, f, n_mc, split_rng(rng, name), paired=paired)
        out[name] = {"estimate": est.estimate, "std_err": est.std_err, "target": target,
                     "pass": est.within(target, 4.0)}
    A = np.zeros((3, 3))
    A[0, 1] = A[1, 0] = 0.5
    closed = closed_form_gap(P, Ph, QuadraticFunction(A))
    out["dependent_cross"]["closed_form"] = closed
    out["dependent_cross"]["closed_form_pass"] = abs(closed - rho * s0 * s1) <= 1e-9
    return out


# --------------------------------------------------------------------------
# α and β on tabular MDPs
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AlphaBeta:
    alpha: float
    beta: float
    context: tuple = ()

    def in_dr(self) -> bool:
        """0 < α < -β: the lagged model prefers a1 while a0 is truly better."""
        return 0.0 < self.alpha < -self.beta


def alpha_beta(mdp_true: TabularMDP, mdp_lagged: TabularMDP, s: int, a0: int, a1: int,
               reward_id: str = "") -> AlphaBeta:
    qt = value_iteration(mdp_true).Q
    ql = value_iteration(mdp_lagged).Q
    alpha = qt[s, a0] - qt[s, a1]
    beta = (ql[s, a0] - ql[s, a1]) - alpha
    return AlphaBeta(float(alpha), float(beta), (s, a0, a1, reward_id))


def _with_next_reward(mdp: TabularMDP, next_reward) -> TabularMDP:
    return mdp.with_reward(next_reward=np.asarray(next_reward, dtype=np.float64))


def _check_single_step(mdp: TabularMDP):
    if mdp.gamma != 0.0:
        raise ValueError("this construction is defined for single-step MDPs (gamma = 0)")


def _next_reward_or_zero(mdp: TabularMDP) -> np.ndarray:
    return mdp.next_reward if mdp.next_reward is not None else np.zeros(mdp.n_next)


def outcome_coordinates(mdp: TabularMDP) -> np.ndarray:
    """Per-dimension coordinates of each next-state outcome, ``(n_next, n_dims)``.

    Grid-backed outcomes use cell centers, others their integer indices.
    """
    shape = mdp.next_shape()
    if shape is None:
        raise ValueError("outcomes lack a product structure")
    grid = mdp.next_grid or (mdp.state_grid if mdp.n_next == mdp.n_states else None)
    if grid is not None and tuple(grid.n_cells) == tuple(shape):
        return grid.centers()
    return np.array(np.unravel_index(np.arange(int(np.prod(shape))), shape), dtype=np.float64).T


def beta_symmetry_check(mdp_true: TabularMDP, mdp_lagged: TabularMDP, s: int, a0: int, a1: int,
                        R=None, rng: Optional[RngStream] = None, n_f: int = 10) -> dict:
    """β(-R) = -β(R) and β(R + f(s_i)) = β(R) for random single-dimension f."""
    _check_single_step(mdp_true)
    rng = rng if rng is not None else RngStream(0)
    R = _next_reward_or_zero(mdp_true) if R is None else np.asarray(R, dtype=np.float64)
    shape = mdp_true.next_shape()
    coords = np.array(np.unravel_index(np.arange(mdp_true.n_next), shape)).T

    def beta(vec):
        return alpha_beta(_with_next_reward(mdp_true, vec), _with_next_reward(mdp_lagged, vec), s, a0, a1).beta

    b = beta(R)
    neg_ok = abs(beta(-R) + b) <= EXACT_TOL
    shifts = []
    for k in range(n_f):
        d = int(rng.integers(0, len(shape)))
        table = rng.normal(0.0, 5.0, size=shape[d])
        shifts.append(beta(R + table[coords[:, d]]) - b)
    add_ok = all(abs(x) <= EXACT_TOL for x in shifts)
    return {"beta": b, "negation_ok": bool(neg_ok), "single_dim_shift_ok": bool(add_ok),
            "max_shift": float(max(map(abs, shifts), default=0.0)), "pass": bool(neg_ok and add_ok)}


def default_f_basis(mdp: TabularMDP) -> list[np.ndarray]:
    """Coordinate projections, then per-dimension indicator bins."""
    coords = outcome_coordinates(mdp)
    shape = mdp.next_shape()
    idx = np.array(np.unravel_index(np.arange(mdp.n_next), shape)).T
    basis = [coords[:, d].copy() for d in range(len(shape))]
    for d, n_d in enumerate(shape):
        basis.extend((idx[:, d] == k).astype(np.float64) for k in range(n_d))
    return basis


@dataclass(frozen=True)
class DRConstruction:
    next_reward: np.ndarray
    x: float
    ab: AlphaBeta
    sign: float
    f: np.ndarray
    K: float
    interval: tuple[float, float]


def construct_dr_reward(mdp_true: TabularMDP, mdp_lagged: TabularMDP, s: int, a0: int, a1: int,
                        R0=None, f_basis: Optional[Sequence[np.ndarray]] = None) -> DRConstruction:
    """Build R1 = ±R0 + x f with 0 < α(R1) < -β(R1) at (s, a0, a1).

    ``R0`` is a next-state reward vector or a list of candidates; the first
    with β ≠ 0 is used and its sign chosen so that β < 0.  ``f`` is the
    first single-dimension basis function whose mean differs between a0
    and a1 (sign chosen so that K > 0); x is the midpoint of
    (-α/K, -(α+β)/K).
    """
    _check_single_step(mdp_true)
    candidates = [_next_reward_or_zero(mdp_true)] if R0 is None else (
        [np.asarray(R0, dtype=np.float64)] if np.ndim(R0) == 1 else [np.asarray(r, dtype=np.float64) for r in R0])

    def ab_for(vec):
        return alpha_beta(_with_next_reward(mdp_true, vec), _with_next_reward(mdp_lagged, vec), s, a0, a1)

    chosen = None
    for cand in candidates:
        ab0 = ab_for(cand)
        if abs(ab0.beta) > EXACT_TOL:
            chosen = (cand, ab0)
            break
    if chosen is None:
        raise ValueError("no instantaneous dependence detected: beta(R0) = 0 for every candidate")
    R, ab0 = chosen
    sign = 1.0
    if ab0.beta > 0:
        R, sign = -R, -1.0
        ab0 = ab_for(R)
    basis = default_f_basis(mdp_true) if f_basis is None else [np.asarray(f, dtype=np.float64) for f in f_basis]
    f, K = None, 0.0
    for cand in basis:
        k = float(mdp_true.expect(cand)[s, a0] - mdp_true.expect(cand)[s, a1])
        if abs(k) > EXACT_TOL:
            f, K = (cand, k) if k > 0 else (-cand, -k)
            break
    if f is None:
        raise ValueError("action marginals identical: no basis function separates a0 from a1")
    lo, hi = -ab0.alpha / K, -(ab0.alpha + ab0.beta) / K
    x = 0.5 * (lo + hi)
    R1 = R + x * f
    ab1 = ab_for(R1)
    if not ab1.in_dr():
        raise ArithmeticError(f"construction failed to certify membership: {ab1}")
    return DRConstruction(R1, float(x), ab1, sign, f, K, (float(lo), float(hi)))


# --------------------------------------------------------------------------
# Factored transitions: the β = 0 regime
# --------------------------------------------------------------------------


def factored_joint(marginals: Sequence[np.ndarray], shape: Sequence[int], coupling: float) -> np.ndarray:
    """Joint next-state law with the given per-dimension marginals.

    Mixes the comonotone coupling (all dimensions driven by one uniform)
    with weight ``coupling`` and the independent product with weight
    ``1 - coupling``; marginals are preserved exactly.  Returns
    ``(S, A, prod(shape))``.
    """
    if not 0.0 <= coupling <= 1.0:
        raise ValueError("coupling must lie in [0, 1]")
    S, A = marginals[0].shape[:2]
    indep = ProductTransitions(tuple(marginals)).dense()
    if coupling == 0.0:
        return indep
    como = np.zeros_like(indep)
    for s in range(S):
        for a in range(A):
            cdfs = [np.cumsum(m[s, a]) for m in marginals]
            cuts = np.unique(np.concatenate([[0.0], *cdfs]).clip(0, 1))
            for u0, u1 in zip(cuts[:-1], cuts[1:]):
                if u1 - u0 <= 0:
                    continue
                mid = 0.5 * (u0 + u1)
                cell = [min(int(np.searchsorted(c, mid)), n - 1) for c, n in zip(cdfs, shape)]
                como[s, a, np.ravel_multi_index(cell, shape)] += u1 - u0
    return coupling * como + (1.0 - coupling) * indep


def is_factored(mdp: TabularMDP, shape: Sequence[int], tol: float = 1e-12) -> bool:
    """Each next-dimension marginal depends only on its own current dimension and the action."""
    shape = tuple(shape)
    if mdp.n_states != int(np.prod(shape)):
        return False
    margs = next_marginals(mdp, shape)
    for d, m in enumerate(margs):
        t = m.reshape(*shape, mdp.n_actions, shape[d])
        t = np.moveaxis(t, d, 0).reshape(shape[d], -1, mdp.n_actions, shape[d])
        if np.abs(t - t[:, :1]).max() > tol:
            return False
    return True


@dataclass(frozen=True)
class BetaZeroReport:
    max_abs_beta: float
    argmax: tuple
    factored: bool


def beta_table(mdp: TabularMDP, mdp_lagged: Optional[TabularMDP] = None, tol: float = 1e-12) -> np.ndarray:
    """β(s, a0, a1) for every state and ordered action pair, ``(S, A, A)``."""
    lag = mdp_lagged if mdp_lagged is not None else laggedize(mdp)
    qt = value_iteration(mdp, tol=tol).Q
    ql = value_iteration(lag, tol=tol).Q
    dt = qt[:, :, None] - qt[:, None, :]
    dl = ql[:, :, None] - ql[:, None, :]
    return dl - dt


def verify_beta_zero(mdp: TabularMDP, shape: Optional[Sequence[int]] = None, tol: float = 1e-12) -> BetaZeroReport:
    """Largest |β| over all (s, a0, a1) between ``mdp`` and its lagged version."""
    shape = tuple(shape) if shape is not None else mdp.next_shape()
    b = np.abs(beta_table(mdp, laggedize(mdp, shape), tol))
    arg = np.unravel_index(int(np.argmax(b)), b.shape)
    return BetaZeroReport(float(b.max()), tuple(int(x) for x in arg), is_factored(mdp, shape))


# --------------------------------------------------------------------------
# Reference MDPs
# --------------------------------------------------------------------------


def two_bit_mdp(p_one: float = 0.6) -> TabularMDP:
    """Single state; a0 yields s1 = s2 with P(s1 = 1) = p_one, a1 two fair independent bits.

    Outcomes are indexed ``2*s1 + s2``; the reward is 1{s1 = s2}.
    """
    P = np.zeros((1, 2, 4))
    P[0, 0, 0], P[0, 0, 3] = 1 - p_one, p_one
    P[0, 1, :] = 0.25
    same = np.array([1.0, 0.0, 0.0, 1.0])
    return TabularMDP(P, np.zeros((1, 2)), 0.0, next_reward=same, outcome_shape=(2, 2))


def enumerate_two_bit(p_one: float, next_reward) -> dict:
    """Independent oracle: expected rewards under P and under the product of marginals."""
    r = np.asarray(next_reward, dtype=np.float64).reshape(2, 2)
    joint = {0: {(0, 0): 1 - p_one, (1, 1): p_one},
             1: {(i, j): 0.25 for i in (0, 1) for j in (0, 1)}}
    out = {}
    for a, law in joint.items():
        m1 = [sum(p for (i, _), p in law.items() if i == v) for v in (0, 1)]
        m2 = [sum(p for (_, j), p in law.items() if j == v) for v in (0, 1)]
        out[("true", a)] = sum(p * r[i, j] for (i, j), p in law.items())
        out[("lagged", a)] = sum(m1[i] * m2[j] * r[i, j] for i in (0, 1) for j in (0, 1))
    return out


def factored_mdp(n_values: int = 5, n_actions: int = 2, coupling: float = 0.8, gamma: float = 0.9,
                 rng: Optional[RngStream] = None, action_dims: Sequence[int] = (0,)) -> TabularMDP:
    """Random 2-D MDP whose next dimensions depend on their own dimension only.

    Only dimensions in ``action_dims`` react to the action.  The joint
    couples the two next dimensions, so the MDP carries instantaneous
    dependence while staying factored.  Reward is zero; attach one with
    :meth:`TabularMDP.with_reward`.
    """
    rng = rng if rng is not None else RngStream(0)
    shape = (n_values, n_values)
    margs = []
    for d in range(2):
        acts = n_actions if d in action_dims else 1
        own = rng.dirichlet(np.ones(n_values) * 0.7, size=(n_values, acts))
        if acts == 1:
            own = np.repeat(own, n_actions, axis=1)
        # broadcast over the other dimension: index by (s0, s1)
        full = own[:, None] if d == 0 else own[None, :]
        full = np.broadcast_to(full, (n_values, n_values, n_actions, n_values)).reshape(-1, n_actions, n_values)
        margs.append(np.ascontiguousarray(full))
    P = factored_joint(margs, shape, coupling)
    return TabularMDP(P, np.zeros((n_values ** 2, n_actions)), gamma, outcome_shape=shape)


def separable_reward(shape: Sequence[int], f0, f1) -> np.ndarray:
    """Next-state reward vector f0(s_0) + f1(s_1) over integer coordinates."""
    c = np.array(np.unravel_index(np.arange(int(np.prod(shape))), tuple(shape)), dtype=np.float64)
    return f0(c[0]) + f1(c[1])


def cross_reward(shape: Sequence[int]) -> np.ndarray:
    c = np.array(np.unravel_index(np.arange(int(np.prod(shape))), tuple(shape)), dtype=np.float64)
    return c[0] * c[1]
