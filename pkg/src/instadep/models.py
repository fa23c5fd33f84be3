"""One-step Gaussian dynamics models in lagged and instantaneous modes.

A model predicts a mean next state, per-dimension scales and a correlation
matrix.  The lagged mode pins the correlation to the identity, so its
implied covariance is diagonal and its joint is the product of its
marginals; the instantaneous mode carries a full correlation matrix Γ
estimated from prediction residuals.  Both modes share the mean and scales
of a fit, so their per-dimension marginals are identical.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Literal, Optional

import numpy as np
from scipy.optimize import nnls

from .core import CorrelationMatrix, Dataset, GaussianPrediction, repair_correlation, state_vec

RIDGE_LAMBDA = 1e-8
VAR_FLOOR = 1e-12
LOG_2PI = math.log(2 * math.pi)

MeanKind = Literal["linear_least_squares", "tabular_conditional"]
Mode = Literal["lagged", "instantaneous"]
ScaleKind = Literal["homoscedastic", "state_proportional"]


# --------------------------------------------------------------------------
# Feature maps for linear means
# --------------------------------------------------------------------------


def _features(name: str, states: np.ndarray) -> np.ndarray:
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if name == "identity":
        phi = states
    elif name == "sign_first":
        # Driving: the main-text transition is linear in (p, v, sign(p))
        phi = np.column_stack([states, np.where(states[:, 0] >= 0, 1.0, -1.0)])
    else:
        raise ValueError(f"unknown feature map {name!r}")
    return np.column_stack([phi, np.ones(len(states))])


FEATURE_MAPS = ("identity", "sign_first")


# --------------------------------------------------------------------------
# Mean predictors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TabularGrid:
    """Axis-aligned grid used to key the tabular mean predictor."""

    lows: np.ndarray
    highs: np.ndarray
    bins: tuple[int, ...]

    def __post_init__(self):
        lows = np.asarray(self.lows, dtype=np.float64)
        highs = np.asarray(self.highs, dtype=np.float64)
        bins = tuple(int(b) for b in self.bins)
        if lows.shape != highs.shape or len(bins) != len(lows) or np.any(highs <= lows) or min(bins) < 1:
            raise ValueError("grid needs matching lows/highs/bins with highs > lows and bins >= 1")
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)
        object.__setattr__(self, "bins", bins)

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.bins))

    def cell_coords(self, states) -> np.ndarray:
        states = np.atleast_2d(states)
        width = (self.highs - self.lows) / np.asarray(self.bins)
        idx = np.floor((states - self.lows) / width).astype(np.int64)
        return np.clip(idx, 0, np.asarray(self.bins) - 1)

    def cell_index(self, states) -> np.ndarray:
        return np.ravel_multi_index(self.cell_coords(states).T, self.bins)


@dataclass
class MissCounter:
    """Counts tabular lookups that fell back to the nearest populated cell."""

    count: int = 0


@dataclass(frozen=True)
class MeanPredictor:
    """Mean next-state predictor.

    ``linear_least_squares``: ``weights[a]`` maps features ``[phi(s), 1]``
    to the next state.  ``tabular_conditional``: ``table[a, cell]`` is the
    mean next state over the training records in that cell; ``counts``
    marks populated cells.
    """

    kind: MeanKind
    n_actions: int
    dim: int
    weights: Optional[np.ndarray] = None
    feature_map: str = "identity"
    grid: Optional[TabularGrid] = None
    table: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None
    misses: MissCounter = field(default_factory=MissCounter, compare=False)

    def predict_batch(self, states, actions) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.broadcast_to(np.asarray(actions, dtype=np.int64), (len(states),))
        if np.any((actions < 0) | (actions >= self.n_actions)):
            raise ValueError("action out of range")
        if self.kind == "linear_least_squares":
            phi = _features(self.feature_map, states)
            return np.einsum("nf,nfd->nd", phi, self.weights[actions])
        cells = self.grid.cell_index(states)
        hit = self.counts[actions, cells] > 0
        out = self.table[actions, cells].copy()
        for n in np.flatnonzero(~hit):
            out[n] = self.table[actions[n], self._nearest(actions[n], states[n])]
            self.misses.count += 1
        return out

    def _nearest(self, a: int, s: np.ndarray) -> int:
        populated = np.flatnonzero(self.counts[a] > 0)
        coords = np.array(np.unravel_index(populated, self.grid.bins)).T
        target = self.grid.cell_coords(s[None])[0]
        return int(populated[np.argmin(((coords - target) ** 2).sum(axis=1))])


def _solve_ls(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    gram = X.T @ X
    if np.linalg.matrix_rank(X) < X.shape[1]:
        gram = gram + RIDGE_LAMBDA * np.eye(X.shape[1])
        return np.linalg.solve(gram, X.T @ Y)
    return np.linalg.lstsq(X, Y, rcond=None)[0]


def fit_linear_mean(ds: Dataset, n_actions: int, feature_map: str = "identity") -> MeanPredictor:
    """Per-action least squares of next state on ``[phi(s), 1]``.

    Actions with no records share the pooled fit.
    """
    phi = _features(feature_map, ds.states)
    pooled = _solve_ls(phi, ds.next_states)
    W = np.empty((n_actions,) + pooled.shape)
    for a in range(n_actions):
        m = ds.actions == a
        W[a] = _solve_ls(phi[m], ds.next_states[m]) if m.any() else pooled
    return MeanPredictor("linear_least_squares", n_actions, ds.dim, weights=W, feature_map=feature_map)


def fit_tabular_mean(ds: Dataset, n_actions: int, grid: TabularGrid) -> MeanPredictor:
    cells = grid.cell_index(ds.states)
    counts = np.zeros((n_actions, grid.n_cells))
    sums = np.zeros((n_actions, grid.n_cells, ds.dim))
    np.add.at(counts, (ds.actions, cells), 1.0)
    np.add.at(sums, (ds.actions, cells), ds.next_states)
    table = sums / np.maximum(counts, 1.0)[..., None]
    for a in range(n_actions):
        if not counts[a].any():
            raise ValueError(f"no training records for action {a}")
    return MeanPredictor("tabular_conditional", n_actions, ds.dim, grid=grid, table=table, counts=counts)


# --------------------------------------------------------------------------
# Dynamics model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DynamicsModel:
    """Gaussian one-step model with covariance D(s, a) Γ D(s, a).

    ``scale_params`` is ``(n_actions, dim)`` of standard deviations for
    homoscedastic scales, and ``(n_actions, 2, dim)`` of variance
    coefficients ``(b, c)`` with ``var = b + c * |mu - s|`` for
    state-proportional scales.
    """

    mean: MeanPredictor
    scale_params: np.ndarray
    corr: CorrelationMatrix
    mode: Mode = "lagged"
    scale_kind: ScaleKind = "homoscedastic"

    def __post_init__(self):
        if self.mode not in ("lagged", "instantaneous"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.corr.n != self.dim:
            raise ValueError("correlation size must match state dimension")
        if self.mode == "lagged" and not self.corr.is_identity():
            raise ValueError("lagged models carry the identity correlation")

    @property
    def dim(self) -> int:
        return self.mean.dim

    @property
    def n_actions(self) -> int:
        return self.mean.n_actions

    def predict_batch(self, states, actions) -> tuple[np.ndarray, np.ndarray]:
        """Means and scales, each ``(n, dim)``."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.broadcast_to(np.asarray(actions, dtype=np.int64), (len(states),))
        mu = self.mean.predict_batch(states, actions)
        if self.scale_kind == "homoscedastic":
            scales = self.scale_params[actions]
        else:
            b, c = self.scale_params[actions, 0], self.scale_params[actions, 1]
            scales = np.sqrt(np.maximum(b + c * np.abs(mu - states), 0.0))
        return mu, scales

    def with_corr(self, corr: CorrelationMatrix) -> "DynamicsModel":
        return replace(self, corr=corr)

    def as_mode(self, mode: Mode) -> "DynamicsModel":
        """Same mean and scales in the other mode (lagged drops Γ)."""
        corr = CorrelationMatrix.identity(self.dim) if mode == "lagged" else self.corr
        return replace(self, mode=mode, corr=corr)


def _fit_scales(ds: Dataset, mean: MeanPredictor, n_actions: int, scale_kind: ScaleKind) -> np.ndarray:
    mu = mean.predict_batch(ds.states, ds.actions)
    resid = ds.next_states - mu
    d = ds.dim
    if scale_kind == "homoscedastic":
        pooled = np.sqrt(np.mean(resid ** 2, axis=0))
        out = np.empty((n_actions, d))
        for a in range(n_actions):
            m = ds.actions == a
            out[a] = np.sqrt(np.mean(resid[m] ** 2, axis=0)) if m.sum() > 1 else pooled
        return out
    if scale_kind != "state_proportional":
        raise ValueError(f"unknown scale kind {scale_kind!r}")
    step = np.abs(mu - ds.states)
    out = np.zeros((n_actions, 2, d))
    for a in range(n_actions):
        m = ds.actions == a
        if m.sum() < 2:
            m = np.ones(len(ds), dtype=bool)
        for i in range(d):
            # nonnegative moment fit of var = b + c * |step|
            X = np.column_stack([np.ones(m.sum()), step[m, i]])
            out[a, :, i] = nnls(X, resid[m, i] ** 2)[0]
    return out


def fit_model(ds: Dataset, kind: MeanKind = "linear_least_squares", mode: Mode = "lagged", *,
              n_actions: Optional[int] = None, feature_map: str = "identity",
              scale_kind: ScaleKind = "homoscedastic", grid: Optional[TabularGrid] = None) -> DynamicsModel:
    """Fit mean and scales on ``ds``; the correlation starts at the identity."""
    if len(ds) == 0:
        raise ValueError("cannot fit on an empty dataset")
    n_actions = int(ds.actions.max()) + 1 if n_actions is None else n_actions
    if kind == "linear_least_squares":
        if len(ds) < ds.dim + 2:
            raise ValueError(f"linear fit needs at least {ds.dim + 2} records, got {len(ds)}")
        mean = fit_linear_mean(ds, n_actions, feature_map)
    elif kind == "tabular_conditional":
        if grid is None:
            raise ValueError("tabular fit needs a grid")
        mean = fit_tabular_mean(ds, n_actions, grid)
    else:
        raise ValueError(f"unknown mean kind {kind!r}")
    scales = _fit_scales(ds, mean, n_actions, scale_kind)
    return DynamicsModel(mean, scales, CorrelationMatrix.identity(ds.dim), mode, scale_kind)


def predict(model: DynamicsModel, s, a: int) -> GaussianPrediction:
    s = state_vec(s, model.dim)
    mu, scales = model.predict_batch(s[None], np.array([a]))
    return GaussianPrediction(mu[0], scales[0], model.corr)


def residuals(model: DynamicsModel, states, actions, next_states) -> np.ndarray:
    """Raw prediction errors standardized by the model's predicted scales."""
    mu, scales = model.predict_batch(states, actions)
    return (np.atleast_2d(next_states) - mu) / np.maximum(scales, math.sqrt(VAR_FLOOR))


# --------------------------------------------------------------------------
# Correlation estimation
# --------------------------------------------------------------------------


class ResidualWindow:
    """FIFO of standardized residual vectors with fixed capacity."""

    def __init__(self, capacity: int = 2000, dim: Optional[int] = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self._buf: deque = deque(maxlen=capacity)

    def push(self, e) -> None:
        e = np.asarray(e, dtype=np.float64)
        for row in np.atleast_2d(e):
            if self.dim is None:
                self.dim = len(row)
            elif len(row) != self.dim:
                raise ValueError("residual dimension mismatch")
            self._buf.append(row.copy())

    def __len__(self) -> int:
        return len(self._buf)

    def array(self) -> np.ndarray:
        return np.array(self._buf) if self._buf else np.zeros((0, self.dim or 0))


def empirical_correlation(E: np.ndarray) -> np.ndarray:
    """Pearson correlation; zero-variance dimensions get identity rows."""
    E = np.asarray(E, dtype=np.float64)
    centered = E - E.mean(axis=0)
    sd = np.sqrt(np.mean(centered ** 2, axis=0))
    ok = sd > 1e-12 * max(1.0, float(np.abs(E).max(initial=0.0)))
    z = np.where(ok, centered / np.where(ok, sd, 1.0), 0.0)
    C = z.T @ z / len(E)
    C[~ok, :] = 0.0
    C[:, ~ok] = 0.0
    np.fill_diagonal(C, 1.0)
    return C


def update_corr(window: ResidualWindow, current: CorrelationMatrix, shrink: float = 0.05) -> CorrelationMatrix:
    """Γ' = (1 - shrink) Γ_emp + shrink I, repaired to a valid correlation matrix."""
    if not 0.0 <= shrink <= 1.0:
        raise ValueError("shrink must lie in [0, 1]")
    E = window.array()
    if E.shape[1] != current.n:
        raise ValueError("window dimension does not match the current correlation")
    if len(E) < 2 * current.n:
        raise ValueError(f"need at least {2 * current.n} residuals, have {len(E)}")
    C = (1.0 - shrink) * empirical_correlation(E) + shrink * np.eye(current.n)
    return repair_correlation(C)


# --------------------------------------------------------------------------
# Likelihood loss
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LossResult:
    value: float
    floored: bool


def likelihood_loss(pred: GaussianPrediction, x, with_flag: bool = False):
    """log|Σ| + (x-μ)ᵀΣ⁻¹(x-μ) + n log 2π with Σ = D Γ D (i.e. -2 log density)."""
    x = state_vec(x, pred.dim)
    vals, floored = likelihood_loss_batch(pred.mean[None], pred.scales[None], pred.corr, x[None])
    res = LossResult(float(vals[0]), bool(floored))
    return res if with_flag else res.value


def likelihood_loss_batch(means, scales, corr, X) -> tuple[np.ndarray, bool]:
    """Per-row loss for rows sharing one correlation matrix; returns ``(losses, floored)``."""
    means, scales, X = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (means, scales, X))
    G = np.asarray(corr, dtype=np.float64)
    n = means.shape[1]
    var = scales ** 2
    floored = bool(np.any(var < VAR_FLOOR))
    sd = np.sqrt(np.maximum(var, VAR_FLOOR))
    sign, logdet_g = np.linalg.slogdet(G)
    if sign <= 0 or logdet_g < math.log(VAR_FLOOR):
        G = (1 - 1e-6) * G + 1e-6 * np.eye(n)
        sign, logdet_g = np.linalg.slogdet(G)
        floored = True
    z = (X - means) / sd
    L = np.linalg.cholesky(G)
    w = np.linalg.solve(L, z.T)
    quad = np.sum(w ** 2, axis=0)
    return 2 * np.log(sd).sum(axis=1) + logdet_g + quad + n * LOG_2PI, floored


def marginal_losses(means, scales, X) -> np.ndarray:
    """Per-dimension univariate losses, ``(n, dim)``; identical across modes."""
    means, scales, X = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (means, scales, X))
    var = np.maximum(scales ** 2, VAR_FLOOR)
    return np.log(var) + (X - means) ** 2 / var + LOG_2PI


def model_loss(model: DynamicsModel, ds: Dataset) -> np.ndarray:
    mu, scales = model.predict_batch(ds.states, ds.actions)
    return likelihood_loss_batch(mu, scales, model.corr, ds.next_states)[0]


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def model_to_dict(model: DynamicsModel) -> dict:
    m = model.mean
    mean = {"kind": m.kind, "n_actions": m.n_actions, "dim": m.dim}
    if m.kind == "linear_least_squares":
        mean.update(weights=m.weights.tolist(), feature_map=m.feature_map)
    else:
        mean.update(grid={"lows": m.grid.lows.tolist(), "highs": m.grid.highs.tolist(),
                          "bins": list(m.grid.bins)},
                    table=m.table.tolist(), counts=m.counts.tolist())
    return {"mode": model.mode, "scale_kind": model.scale_kind, "mean": mean,
            "scale_params": model.scale_params.tolist(), "corr": model.corr.entries.tolist()}


def model_from_dict(doc: dict) -> DynamicsModel:
    md = doc["mean"]
    if md["kind"] == "linear_least_squares":
        mean = MeanPredictor("linear_least_squares", md["n_actions"], md["dim"],
                             weights=np.array(md["weights"], dtype=np.float64),
                             feature_map=md.get("feature_map", "identity"))
    else:
        g = md["grid"]
        mean = MeanPredictor("tabular_conditional", md["n_actions"], md["dim"],
                             grid=TabularGrid(np.array(g["lows"]), np.array(g["highs"]), tuple(g["bins"])),
                             table=np.array(md["table"], dtype=np.float64),
                             counts=np.array(md["counts"], dtype=np.float64))
    return DynamicsModel(mean, np.array(doc["scale_params"], dtype=np.float64),
                         CorrelationMatrix(np.array(doc["corr"], dtype=np.float64)),
                         doc["mode"], doc.get("scale_kind", "homoscedastic"))


def model_to_json(model: DynamicsModel) -> str:
    return json.dumps(model_to_dict(model))


def model_from_json(text: str) -> DynamicsModel:
    return model_from_dict(json.loads(text))
