import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instadep.core import CorrelationError, CorrelationMatrix, RngStream, split_rng
from instadep.models import DynamicsModel, MeanPredictor
from instadep.rollout import (RolloutConfig, RolloutReport, correlation_factor, rollout, sample_correlated,
                              step_model, step_model_batch)


def make_model(A=None, c=(0.0, 0.0), scales=(1.0, 1.0), rho=0.0, n_actions=2):
    """Linear mean s' = A s + c + 0.5 a, fixed scales, correlation rho on the pair."""
    dim = len(c)
    A = np.eye(dim) if A is None else np.asarray(A, dtype=np.float64)
    W = np.zeros((n_actions, dim + 1, dim))
    for a in range(n_actions):
        W[a, :dim] = A.T
        W[a, dim] = np.asarray(c) + 0.5 * a
    mean = MeanPredictor("linear_least_squares", n_actions, dim, weights=W)
    G = np.eye(dim)
    if dim >= 2:
        G[0, 1] = G[1, 0] = rho
    mode = "lagged" if rho == 0 else "instantaneous"
    sc = np.tile(np.asarray(scales, dtype=np.float64), (n_actions, 1))
    return DynamicsModel(mean, sc, CorrelationMatrix(G), mode)


def cov_se(cov, n):
    """Standard errors of sample covariance entries for a Gaussian."""
    return np.sqrt((cov ** 2 + np.outer(np.diag(cov), np.diag(cov))) / n)


class TestSampleCorrelated:
    def test_identity(self):
        X = sample_correlated(CorrelationMatrix.identity(3), RngStream(0), size=100_000)
        np.testing.assert_allclose(X.var(axis=0), 1.0, atol=0.02)
        C = np.corrcoef(X.T)
        assert np.abs(C[np.triu_indices(3, 1)]).max() < 0.02

    @pytest.mark.parametrize("rho", [0.9, -0.9])
    def test_pair_correlation(self, rho):
        X = sample_correlated(CorrelationMatrix([[1, rho], [rho, 1]]), RngStream(1), size=100_000)
        assert abs(np.corrcoef(X.T)[0, 1] - rho) < 0.01

    def test_single_draw_shape(self):
        assert sample_correlated(CorrelationMatrix.identity(4), RngStream(0)).shape == (4,)

    def test_boundary_matrix_factors(self):
        L = correlation_factor(np.ones((3, 3)))
        np.testing.assert_allclose(L @ L.T, np.ones((3, 3)), atol=1e-8)

    def test_unfactorable_names_matrix(self):
        with pytest.raises(CorrelationError, match=r"\[\["):
            correlation_factor([[1.0, 2.0], [2.0, 1.0]])


class TestStepModel:
    def test_zero_scales_returns_mean(self):
        m = make_model(scales=(0.0, 0.0), rho=0.5)
        out = step_model(m, [1.0, -2.0], 1, RngStream(0))
        np.testing.assert_array_equal(out, [1.5, -1.5])

    def test_hand_computed_covariance(self):
        m = make_model(scales=(1.0, 2.0), rho=0.5)
        S = np.zeros((100_000, 2))
        X = step_model_batch(m, S, np.zeros(len(S), dtype=int), RngStream(3))
        target = np.array([[1.0, 1.0], [1.0, 4.0]])
        assert np.all(np.abs(np.cov(X.T) - target) <= 5 * cov_se(target, len(X)))

    def test_identity_corr_is_independent_sampling(self):
        m = make_model(scales=(1.0, 3.0))
        X = step_model_batch(m, np.zeros((100_000, 2)), np.zeros(100_000, dtype=int), RngStream(4))
        assert abs(np.corrcoef(X.T)[0, 1]) < 0.02
        np.testing.assert_allclose(X.std(axis=0), [1.0, 3.0], rtol=0.02)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_mean_and_cov_within_five_se(self, seed):
        rng = RngStream(seed)
        dim = 3
        scales = rng.uniform(0.2, 2.0, size=dim)
        raw = rng.normal(size=(dim, dim + 2))
        Sg = raw @ raw.T
        d = np.sqrt(np.diag(Sg))
        G = CorrelationMatrix(np.clip(Sg / np.outer(d, d), -1, 1))
        m = DynamicsModel(make_model(c=np.zeros(dim), rho=0.0).mean, np.tile(scales, (2, 1)), G, "instantaneous")
        s = rng.normal(size=dim)
        n = 100_000
        X = step_model_batch(m, np.tile(s, (n, 1)), np.ones(n, dtype=int), split_rng(rng, "draws"))
        target = np.outer(scales, scales) * G.entries
        mu = s + 0.5
        assert np.all(np.abs(X.mean(axis=0) - mu) <= 5 * scales / np.sqrt(n))
        assert np.all(np.abs(np.cov(X.T) - target) <= 5 * cov_se(target, n))

    def test_deciles_agree_between_modes(self):
        n = 100_000
        lag = make_model(scales=(1.0, 2.0))
        ins = make_model(scales=(1.0, 2.0), rho=0.9)
        S, a = np.zeros((n, 2)), np.zeros(n, dtype=int)
        Xl = step_model_batch(lag, S, a, RngStream(5))
        Xi = step_model_batch(ins, S, a, RngStream(6))
        q = np.linspace(0.1, 0.9, 9)
        # decile of a unit normal has sd at most about 2.1 / sqrt(n); allow two samples at 5 se
        tol = 5 * np.sqrt(2) * 2.1 / np.sqrt(n)
        for d, sc in enumerate((1.0, 2.0)):
            assert np.abs(np.quantile(Xl[:, d], q) - np.quantile(Xi[:, d], q)).max() < tol * sc
        assert abs(np.corrcoef(Xi.T)[0, 1] - 0.9) < 0.01


def zero_reward(s, a, sp):
    return np.zeros(len(s)), np.zeros(len(s), dtype=bool)


def first_action(s, rng):
    return np.zeros(len(s), dtype=int)


class TestRollout:
    def test_single_step_single_start(self):
        ds = rollout(make_model(), first_action, [[0.0, 0.0]], RolloutConfig(1, 1, 1), zero_reward, RngStream(0))
        assert len(ds) == 1
        assert ds.provenance == "model"

    def test_counting(self):
        starts = RngStream(0).normal(size=(10, 2))
        ds = rollout(make_model(rho=0.3), first_action, starts, RolloutConfig(5, 10, 2), zero_reward,
                     RngStream(1))
        assert len(ds) == 100

    def test_deterministic_branches_identical(self):
        m = make_model(scales=(0.0, 0.0))
        ds = rollout(m, first_action, [[1.0, 2.0]], RolloutConfig(4, 1, 2), zero_reward, RngStream(2))
        assert len(ds) == 8
        X = ds.next_states.reshape(4, 2, 2)
        np.testing.assert_array_equal(X[:, 0], X[:, 1])

    def test_same_rng_reproduces(self):
        args = (make_model(rho=0.6), first_action, [[0.0, 1.0], [1.0, 0.0]], RolloutConfig(3, 2, 2), zero_reward)
        a = rollout(*args, RngStream(9))
        b = rollout(*args, RngStream(9))
        np.testing.assert_array_equal(a.next_states, b.next_states)

    def test_terminal_stops_branch(self):
        def stop_at_once(s, a, sp):
            return np.ones(len(s)), np.ones(len(s), dtype=bool)
        ds = rollout(make_model(), first_action, [[0.0, 0.0]] * 3, RolloutConfig(5, 3, 1), stop_at_once,
                     RngStream(0))
        assert len(ds) == 3
        assert ds.terminals.all()

    def test_rewards_from_reward_fn(self):
        def r_fn(s, a, sp):
            return sp[:, 0] - s[:, 0], np.zeros(len(s), dtype=bool)
        ds = rollout(make_model(scales=(0.0, 0.0)), first_action, [[0.0, 0.0]], RolloutConfig(2, 1, 1), r_fn,
                     RngStream(0))
        np.testing.assert_array_equal(ds.rewards, ds.next_states[:, 0] - ds.states[:, 0])

    def test_non_finite_truncated_and_reported(self):
        m = make_model(A=np.eye(2) * 1e200, c=(1.0, 1.0), scales=(0.0, 0.0))
        report = RolloutReport()
        with np.errstate(over="ignore", invalid="ignore"):
            ds = rollout(m, first_action, [[1.0, 1.0], [0.0, 0.0]], RolloutConfig(4, 2, 1), zero_reward,
                         RngStream(0), report=report)
        assert report.n_truncated >= 1
        assert np.all(np.isfinite(ds.next_states))
        assert len(ds) < 8

    def test_empty_starts_rejected(self):
        with pytest.raises(ValueError):
            rollout(make_model(), first_action, np.zeros((0, 2)), RolloutConfig(), zero_reward, RngStream(0))

    @pytest.mark.parametrize("kw", [dict(k=0), dict(n_starts=0), dict(branch=0)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            RolloutConfig(**kw)
