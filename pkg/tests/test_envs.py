import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instadep.core import RngStream, split_rng
from instadep.envs import (CartPoleLite, DrivingEnv, DrivingParams, LinearGaussianSpec, NoiseInjectConfig, NoisyEnv,
                           RewardAugmentConfig, RewardFamily, aggregated_noise_cov, calibrate_family_bounds,
                           calibrate_norm_bounds, cartpole_lite_step, driving_step, family_term, reward_family,
                           simulate_compound_noise, subsampled_noise_cov, wrap_noise_inject, wrap_reward_augment)

QUIET = dict(sigma_v=0.0, sigma_p=0.0)


class TestDriving:
    def test_appendix_deterministic_step(self):
        p = DrivingParams(sign_mode="appendix", **QUIET)
        sp, _, _ = driving_step(p, (1.0, 0.0), 1, RngStream(0))
        np.testing.assert_allclose(sp, [2.0, 1.0])

    def test_main_text_step_pushes_towards_origin(self):
        p = DrivingParams(sign_mode="main_text", **QUIET)
        sp, r, term = driving_step(p, (1.0, 0.0), 1, RngStream(0))
        np.testing.assert_allclose(sp, [0.0, -1.0])
        # |(p', v')| = 1 lies outside the goal disk
        assert not term and r == -1.0

    def test_goal_disk_terminates(self):
        p = DrivingParams(sign_mode="main_text", **QUIET)
        sp, _, term = driving_step(p, (0.05, 0.05), 0, RngStream(0))
        np.testing.assert_allclose(sp, [0.0, -0.05])
        assert term

    def test_noise_scale_from_ratio(self):
        assert DrivingParams(g_ratio=0.1).g[0] == pytest.approx(0.01)

    def test_sign_tie_break_at_origin(self):
        p = DrivingParams(**QUIET, goal_radius=1e-9)
        sp, _, _ = driving_step(p, (0.0, 0.0), 0, RngStream(0))
        # sign(0) = +1 so the push is towards negative velocity
        np.testing.assert_allclose(sp, [-0.1, -0.1])

    def test_step_budget_terminates(self):
        p = DrivingParams(max_steps=5)
        _, _, done = driving_step(p, (1.5, 1.5), 0, RngStream(0), t=4)
        assert done

    def test_zero_noise_reproducible(self):
        env = DrivingEnv(DrivingParams(**QUIET))
        s = np.array([[1.3, -0.4], [-0.7, 0.2]])
        a = np.array([0, 1])
        np.testing.assert_array_equal(env.step_batch(s, a, RngStream(1))[0], env.step_batch(s, a, RngStream(2))[0])

    @pytest.mark.parametrize("mode,expected", [("penalty", -1.0), ("product", 2.0 * 1.0 - 1.0 * 0.0),
                                               ("quadratic", -(3.0 ** 2) + 1.0)])
    def test_reward_modes(self, mode, expected):
        p = DrivingParams(sign_mode="appendix", reward_mode=mode, **QUIET)
        _, r, _ = driving_step(p, (1.0, 0.0), 1, RngStream(0))
        assert r == pytest.approx(expected)

    def test_velocity_noise_enters_position(self):
        p = DrivingParams(sigma_v=1.0, g_ratio=1.0, sign_mode="appendix")
        env = DrivingEnv(p)
        s = np.zeros((20_000, 2)) + [5.0, 0.0]
        sp = env.transition_batch(s, np.ones(20_000, dtype=int), RngStream(3))
        assert np.var(sp[:, 1]) == pytest.approx(1.0, rel=0.05)
        assert np.corrcoef(sp.T)[0, 1] == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("bad", [dict(dv=(1.0, 0.1)), dict(dt=0.0), dict(goal_radius=0.0),
                                     dict(sign_mode="x"), dict(g_ratio=-1.0)])
    def test_invalid_params(self, bad):
        with pytest.raises(ValueError):
            DrivingParams(**bad)


class TestNoiseInject:
    def test_zero_rate_is_identity(self):
        base = np.array([1.0, 2.0])
        np.testing.assert_array_equal(
            wrap_noise_inject(base, np.zeros(2), NoiseInjectConfig(0.0, 0.9), RngStream(0)), base)

    def test_zero_delta_no_noise(self):
        base = np.array([1.0, 2.0])
        np.testing.assert_array_equal(wrap_noise_inject(base, base, NoiseInjectConfig(0.4, 0.9), RngStream(0)), base)

    def test_variance_proportional_to_delta(self):
        n = 100_000
        base = np.ones((n, 2))
        out = wrap_noise_inject(base, np.zeros((n, 2)), NoiseInjectConfig(0.4, 0.9), RngStream(0))
        e = out - base
        assert np.var(e[:, 0]) == pytest.approx(0.4, abs=0.01)
        assert np.corrcoef(e.T)[0, 1] == pytest.approx(0.9, abs=0.02)

    def test_negative_delta_uses_magnitude(self):
        n = 50_000
        out = wrap_noise_inject(np.zeros((n, 2)), np.ones((n, 2)), NoiseInjectConfig(0.4, -0.9), RngStream(1))
        assert np.var(out[:, 1]) == pytest.approx(0.4, rel=0.03)
        assert np.corrcoef(out.T)[0, 1] == pytest.approx(-0.9, abs=0.02)

    def test_rejects_unit_correlation(self):
        with pytest.raises(ValueError):
            NoiseInjectConfig(0.4, 1.0)


class TestRewardAugment:
    cfg = RewardAugmentConfig(-5.0, ((0, 1),), ((1.0, 9.0),))

    def test_zero_coefficient(self):
        assert wrap_reward_augment(2.5, np.array([3.0, 3.0]), RewardAugmentConfig(0.0)) == 2.5

    def test_lower_bound_maps_to_zero(self):
        assert wrap_reward_augment(2.5, np.array([0.5, 0.5]), self.cfg) == pytest.approx(2.5)

    def test_upper_bound_maps_to_full_penalty(self):
        assert wrap_reward_augment(2.5, np.array([1.0, 2.0]), self.cfg) == pytest.approx(-2.5)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_term_bounded(self, x, y):
        extra = wrap_reward_augment(0.0, np.array([x, y]), self.cfg)
        assert -5.0 <= extra <= 0.0

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            RewardAugmentConfig(-1.0, ((0, 1),), ((2.0, 1.0),))

    def test_calibration_orders_bounds(self):
        env = NoisyEnv(DrivingEnv(), NoiseInjectConfig(0.4, 0.9))
        (lo, hi), = calibrate_norm_bounds(env, ((0, 1),), RngStream(0), n_steps=2000)
        assert 0 <= lo < hi

    def test_noisy_env_applies_both(self):
        aug = RewardAugmentConfig(-5.0, ((0, 1),), ((0.0, 1e-9),))
        env = NoisyEnv(DrivingEnv(DrivingParams(**QUIET, sign_mode="appendix")), None, aug)
        _, r, _ = env.step_batch(np.array([[1.0, 0.0]]), np.array([1]), RngStream(0))
        assert r[0] == pytest.approx(-6.0)


class TestCartPole:
    @pytest.mark.parametrize("tag", ["A", "B", "C", "D", "E"])
    def test_rest_state_term_zero(self, tag):
        fam = reward_family(tag)
        bounds = ((0.0, 1.0),) * len(fam.quadratics(np.zeros((1, 4)))[0])
        assert family_term(fam, np.zeros((1, 4)), bounds)[0] == 0.0

    def test_family_a_zero_at_zero_dim(self):
        fam = reward_family("A")
        s = np.array([[0.3, 0.2, 0.0, 0.5]])
        assert family_term(fam, s, ((0.0, 1.0),))[0] == 0.0

    def test_family_c_zero_on_antidiagonal(self):
        fam = reward_family("C")
        s = np.array([[0.3, 0.2, 0.07, -0.07]])
        assert family_term(fam, s, ((0.0, 1.0),))[0] == 0.0

    def test_family_e_pair_correlation(self):
        env = CartPoleLite(reward_family("E"), NoiseInjectConfig(0.01, 0.5, ((2, 3),)))
        n = 100_000
        s = np.tile([0.0, 0.0, 0.05, 0.5], (n, 1))
        base = env.mean_batch(s, np.ones(n, dtype=int))
        e = env.transition_batch(s, np.ones(n, dtype=int), RngStream(0)) - base
        assert np.corrcoef(e[:, 2], e[:, 3])[0, 1] == pytest.approx(0.9, abs=0.02)

    @pytest.mark.parametrize("tag,dims,pairs", [("B", (2, 3), ((2, 3),)), ("C", (0, 2), ((2, 3),)),
                                                ("A", (0, 1), ((2, 3),))])
    def test_family_validation(self, tag, dims, pairs):
        with pytest.raises(ValueError):
            RewardFamily(tag, dims, pairs)

    @pytest.mark.parametrize("tag", ["Original", "A", "B", "C", "D", "E"])
    def test_term_within_unit_interval_on_visited_states(self, tag):
        env = CartPoleLite(reward_family(tag))
        env = CartPoleLite(env.family, env.noise, term_bounds=calibrate_family_bounds(env, RngStream(0), 2000))
        rng = RngStream(1)
        s = env.reset_batch(64, rng)
        for t in range(50):
            sp, r, term = env.step_batch(s, rng.integers(0, 2, size=len(s)), split_rng(rng, str(t)))
            assert np.all((r >= 0.0 - 1e-12) & (r <= 1.0 + 1e-12))
            s = np.where(term[:, None], env.reset_batch(len(s), rng), sp)

    def test_single_step_helper(self):
        sp, r, term = cartpole_lite_step(np.zeros(4), 1, reward_family("Original"),
                                         NoiseInjectConfig(0.0, 0.5, ((2, 3),)), RngStream(0))
        assert sp[1] > 0 and r == 1.0 and not term

    def test_falling_pole_terminates(self):
        sp, r, term = cartpole_lite_step([0.0, 0.0, 0.25, 0.0], 0, reward_family("Original"),
                                         NoiseInjectConfig(0.0, 0.5, ((2, 3),)), RngStream(0))
        assert term


def stable_spec(rng, n=2, k=3):
    A = rng.normal(size=(n, n))
    A *= 0.9 / max(np.abs(np.linalg.eigvals(A)).max(), 1e-9)
    B = rng.normal(size=(n, n))
    return LinearGaussianSpec(A, B @ B.T + 0.1 * np.eye(n), k)


class TestCompoundNoise:
    def test_k1_subsampled(self):
        S = np.array([[2.0, 0.3], [0.3, 1.0]])
        np.testing.assert_allclose(subsampled_noise_cov(LinearGaussianSpec(np.eye(2) * 0.5, S, 1)), S)

    def test_identity_sum(self):
        np.testing.assert_allclose(subsampled_noise_cov(LinearGaussianSpec(np.eye(2), np.eye(2), 3)), 3 * np.eye(2))

    def test_nilpotent_by_hand(self):
        spec = LinearGaussianSpec(np.array([[0.0, 1.0], [0.0, 0.0]]), np.eye(2), 2)
        np.testing.assert_allclose(subsampled_noise_cov(spec), [[2.0, 0.0], [0.0, 1.0]])

    def test_k1_aggregated(self):
        S = np.array([[2.0, 0.3], [0.3, 1.0]])
        np.testing.assert_allclose(aggregated_noise_cov(LinearGaussianSpec(np.eye(2) * 0.5, S, 1)), S)

    def test_zero_transition_aggregated(self):
        # B0 = B1 = I and C1 = A = 0, so (1/4)(I + I); the states are plain noise and
        # the averaged pair (e3 + e4)/2 has covariance I/2
        spec = LinearGaussianSpec(np.zeros((2, 2)), np.eye(2), 2)
        np.testing.assert_allclose(aggregated_noise_cov(spec), 0.5 * np.eye(2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 4))
    def test_results_symmetric_psd(self, seed, k, n):
        spec = stable_spec(RngStream(seed), n, k)
        for fn in (subsampled_noise_cov, aggregated_noise_cov):
            C = fn(spec)
            np.testing.assert_allclose(C, C.T, atol=0)
            assert np.linalg.eigvalsh(C).min() >= -1e-10

    @pytest.mark.parametrize("mode,fn", [("subsample", subsampled_noise_cov), ("aggregate", aggregated_noise_cov)])
    def test_simulation_matches_closed_form(self, mode, fn):
        spec = stable_spec(RngStream(7), 3, 4)
        X = simulate_compound_noise(spec, mode, 100_000, RngStream(8))
        exact = fn(spec)
        se = np.sqrt((exact ** 2 + np.outer(np.diag(exact), np.diag(exact))) / len(X))
        assert np.all(np.abs(np.cov(X.T) - exact) <= 5 * se)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            simulate_compound_noise(stable_spec(RngStream(0)), "bogus", 10, RngStream(0))
