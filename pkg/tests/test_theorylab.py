import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from instadep.core import RngStream, split_rng
from instadep.planning import TabularMDP, laggedize
from instadep.theorylab import (EXACT_TOL, DepStructure, GaussianSampler, QuadraticFunction, alpha_beta,
                                beta_symmetry_check, closed_form_gap, construct_dr_reward, corollary_suite,
                                cross_reward, enumerate_two_bit, factored_joint, factored_mdp, g_decompose,
                                gaussian_expectation, gaussian_quadratic_expectation, is_factored,
                                mc_integral_gap, separable_reward, theorem_gv_check, two_bit_mdp, verify_beta_zero)


def corr_pair(rho, s0=1.0, s1=1.0, mean=(0.0, 0.0)):
    return GaussianSampler(np.asarray(mean), np.array([[s0 ** 2, rho * s0 * s1], [rho * s0 * s1, s1 ** 2]]))


def sum_square(i, j, n):
    """-(s_i + s_j)^2 as a quadratic."""
    A = np.zeros((n, n))
    A[i, i] = A[j, j] = -1.0
    A[i, j] = A[j, i] = -1.0
    return QuadraticFunction(A)


class TestDecompose:
    def test_diagonal_has_no_dependent_part(self):
        d = g_decompose(QuadraticFunction(np.diag([1.0, 2.0, 3.0])), DepStructure([(0, 1)], 3))
        assert d.g_is_zero()

    def test_dependent_sum_square(self):
        d = g_decompose(sum_square(0, 1, 2), DepStructure([(0, 1)], 2))
        assert d.dep_terms == {(0, 1): -2.0}
        np.testing.assert_array_equal(d.single_quad, [-1.0, -1.0])
        assert d.indep_terms == {}

    def test_independent_sum_square(self):
        d = g_decompose(sum_square(0, 2, 3), DepStructure([(0, 1)], 3))
        assert d.g_is_zero()
        assert d.indep_terms == {(0, 2): -2.0}

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6))
    def test_parts_reconstruct(self, seed, n):
        rng = RngStream(seed)
        F = QuadraticFunction(rng.normal(size=(n, n)), rng.normal(size=n), float(rng.normal()))
        all_pairs = list(itertools.combinations(range(n), 2))
        keep = rng.random(len(all_pairs)) < 0.5
        dep = DepStructure([p for p, k in zip(all_pairs, keep) if k], n)
        d = g_decompose(F, dep)
        X = rng.normal(size=(100, n))
        parts = d.evaluate_parts(X)
        assert np.abs(sum(parts.values()) - F(X)).max() < 1e-9
        # dependent part vanishes iff every dependent coefficient is zero
        assert d.g_is_zero() == all(F.A[i, j] == 0 for i, j in dep.pairs)

    def test_symmetrized(self):
        F = QuadraticFunction(np.array([[0.0, 2.0], [0.0, 0.0]]))
        np.testing.assert_array_equal(F.A, [[0.0, 1.0], [1.0, 0.0]])

    @pytest.mark.parametrize("pairs", [[(0, 0)], [(0, 3)]])
    def test_dep_structure_validation(self, pairs):
        with pytest.raises(ValueError):
            DepStructure(pairs, 3)


class TestGaussianQuadratic:
    def test_identity_trace(self):
        assert gaussian_quadratic_expectation(np.zeros(2), np.eye(2), np.eye(2)) == 2.0

    def test_cross_with_correlation(self):
        v = gaussian_quadratic_expectation(np.ones(2), [[1, 0.9], [0.9, 1]], [[0, 1], [1, 0]])
        assert abs(v - 3.8) <= 1e-12

    def test_matches_monte_carlo(self):
        P = corr_pair(0.9, 1.0, 2.0, mean=(0.5, -1.0))
        A = np.array([[1.0, 0.3], [0.3, -0.5]])
        X = P.sample(1_000_000, RngStream(0))
        vals = np.einsum("ni,ij,nj->n", X, A, X)
        se = vals.std(ddof=1) / np.sqrt(len(vals))
        assert abs(vals.mean() - gaussian_quadratic_expectation(P.mean, P.cov, A)) <= 4 * se


class TestIntegralGap:
    def test_constant(self):
        P = corr_pair(0.9)
        est = mc_integral_gap(P, P.lagged(), lambda X: np.full(len(X), 2.5), 10_000, RngStream(0), paired=False)
        assert est.within(0.0)

    def test_single_dim_cubic(self):
        P = corr_pair(0.9, 1.0, 1.5)
        f = lambda X: 2 * X[:, 1] ** 3 - X[:, 1] + 4
        assert mc_integral_gap(P, P.lagged(), f, 1_000_000, RngStream(1), paired=False).within(0.0)

    @pytest.mark.parametrize("rho,s0,s1", [(0.9, 1.0, 1.0), (-0.9, 2.0, 0.5), (0.3, 1.5, 1.5)])
    def test_cross_moment(self, rho, s0, s1):
        P = corr_pair(rho, s0, s1)
        est = mc_integral_gap(P, P.lagged(), lambda X: X[:, 0] * X[:, 1], 1_000_000, RngStream(2))
        assert est.within(rho * s0 * s1)
        assert abs(est.estimate) > 10 * est.std_err

    def test_paired_equals_unpaired_in_expectation(self):
        P = corr_pair(0.5)
        f = lambda X: X[:, 0] * X[:, 1]
        a = mc_integral_gap(P, P.lagged(), f, 200_000, RngStream(3), paired=True)
        b = mc_integral_gap(P, P.lagged(), f, 200_000, RngStream(3), paired=False)
        assert abs(a.estimate - b.estimate) <= 4 * np.hypot(a.std_err, b.std_err)

    def test_closed_form_matches_expectation_difference(self):
        P = corr_pair(0.7, 1.0, 3.0, mean=(1.0, 2.0))
        F = QuadraticFunction(np.array([[0.2, -0.4], [-0.4, 1.0]]), np.array([1.0, -1.0]), 3.0)
        assert abs(closed_form_gap(P, P.lagged(), F)
                   - (gaussian_expectation(F, P) - gaussian_expectation(F, P.lagged()))) <= 1e-12

    def test_corollary_suite(self):
        out = corollary_suite(n_mc=1_000_000, rng=RngStream(5))
        assert all(v["pass"] for v in out.values())
        assert abs(out["dependent_cross"]["closed_form"] - 0.9) <= 1e-9


class TestTheoremGV:
    def test_zero_dependent_part(self):
        P = corr_pair(0.9)
        F = QuadraticFunction(np.diag([1.0, -2.0]), np.array([0.5, 0.5]))
        chk = theorem_gv_check(P, P.lagged(), F, DepStructure([(0, 1)], 2), 100_000, RngStream(0))
        assert chk.agree and chk.closed_agree
        assert abs(chk.closed_lhs) <= 1e-12

    def test_dependent_cross_term(self):
        P = corr_pair(0.9, 1.0, 2.0)
        F = sum_square(0, 1, 2)
        chk = theorem_gv_check(P, P.lagged(), F, DepStructure([(0, 1)], 2), 200_000, RngStream(1))
        assert chk.agree and chk.closed_agree
        assert abs(chk.closed_lhs - (-2.0 * 0.9 * 2.0)) <= 1e-9

    def test_singles_do_not_move_gap(self):
        P = corr_pair(0.6, 1.0, 1.0, mean=(0.3, 0.1))
        F = sum_square(0, 1, 2)
        F2 = F + QuadraticFunction(np.diag([5.0, -3.0]), np.array([2.0, 7.0]), 1.0)
        assert abs(closed_form_gap(P, P.lagged(), F) - closed_form_gap(P, P.lagged(), F2)) <= 1e-12


class TestAlphaBeta:
    def test_identical_models_zero_beta(self):
        mdp = two_bit_mdp()
        assert alpha_beta(mdp, mdp, 0, 0, 1).beta == 0.0

    def test_two_bit_against_enumeration(self):
        mdp = two_bit_mdp(0.6)
        ab = alpha_beta(mdp, laggedize(mdp), 0, 0, 1)
        o = enumerate_two_bit(0.6, mdp.next_reward)
        assert abs(ab.alpha - (o[("true", 0)] - o[("true", 1)])) <= EXACT_TOL
        assert abs(ab.beta - (o[("lagged", 0)] - o[("lagged", 1)] - ab.alpha)) <= EXACT_TOL
        assert abs(ab.alpha - 0.5) <= EXACT_TOL and abs(ab.beta + 0.48) <= EXACT_TOL

    def test_subtracting_first_bit_enters_region(self):
        mdp = two_bit_mdp(0.6)
        R = mdp.next_reward - np.array([0.0, 0.0, 1.0, 1.0])
        ab = alpha_beta(mdp.with_reward(next_reward=R), laggedize(mdp).with_reward(next_reward=R), 0, 0, 1)
        assert abs(ab.alpha - 0.4) <= EXACT_TOL and abs(ab.beta + 0.48) <= EXACT_TOL
        assert ab.in_dr()


class TestSymmetry:
    def test_zero_reward(self):
        mdp = two_bit_mdp()
        out = beta_symmetry_check(mdp, laggedize(mdp), 0, 0, 1, R=np.zeros(4))
        assert out["beta"] == 0.0 and out["pass"]

    def test_two_bit(self):
        mdp = two_bit_mdp(0.6)
        lag = laggedize(mdp)
        out = beta_symmetry_check(mdp, lag, 0, 0, 1, rng=RngStream(4))
        assert out["pass"]
        neg = alpha_beta(mdp.with_reward(next_reward=-mdp.next_reward),
                         lag.with_reward(next_reward=-mdp.next_reward), 0, 0, 1)
        assert abs(neg.beta - 0.48) <= EXACT_TOL

    def test_affine_first_bit_leaves_beta(self):
        mdp = two_bit_mdp(0.6)
        lag = laggedize(mdp)
        s1 = np.array([0.0, 0.0, 1.0, 1.0])
        R = mdp.next_reward + 7 * s1 - 3
        ab = alpha_beta(mdp.with_reward(next_reward=R), lag.with_reward(next_reward=R), 0, 0, 1)
        assert abs(ab.beta + 0.48) <= EXACT_TOL


class TestConstructDR:
    def test_two_bit_midpoint(self):
        mdp = two_bit_mdp(0.6)
        dr = construct_dr_reward(mdp, laggedize(mdp), 0, 0, 1)
        assert dr.interval == pytest.approx((-5.0, -0.2), abs=1e-12)
        assert abs(dr.x + 2.6) <= 1e-12
        assert abs(dr.ab.alpha - 0.24) <= 1e-12 and abs(dr.ab.beta + 0.48) <= 1e-12
        assert dr.ab.in_dr()

    def test_no_dependence_raises(self):
        mdp = two_bit_mdp()
        with pytest.raises(ValueError, match="no instantaneous dependence detected"):
            construct_dr_reward(mdp, mdp, 0, 0, 1)

    def test_identical_marginals_raise(self):
        P = np.zeros((1, 2, 4))
        P[0, 0, [0, 3]] = 0.5
        P[0, 1, :] = 0.25
        mdp = TabularMDP(P, np.zeros((1, 2)), 0.0, next_reward=[1.0, 0, 0, 1.0], outcome_shape=(2, 2))
        with pytest.raises(ValueError, match="action marginals identical"):
            construct_dr_reward(mdp, laggedize(mdp), 0, 0, 1)

    def test_multi_step_rejected(self):
        mdp = TabularMDP(np.ones((1, 1, 1)), np.zeros((1, 1)), 0.5)
        with pytest.raises(ValueError):
            construct_dr_reward(mdp, mdp, 0, 0, 0)

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0.05, 0.95), st.floats(0.01, 100.0))
    def test_always_in_region_and_scale_invariant(self, p_one, lam):
        # at p_one = 0.5 the action marginals coincide and the construction must refuse
        assume(abs(p_one - 0.5) > 1e-3)
        mdp = two_bit_mdp(p_one)
        lag = laggedize(mdp)
        dr = construct_dr_reward(mdp, lag, 0, 0, 1)
        assert 0 < dr.ab.alpha < -dr.ab.beta
        R = lam * dr.next_reward
        ab = alpha_beta(mdp.with_reward(next_reward=R), lag.with_reward(next_reward=R), 0, 0, 1)
        assert ab.in_dr()

    def test_alpha_affine_beta_constant_in_x(self):
        mdp = two_bit_mdp(0.6)
        lag = laggedize(mdp)
        dr = construct_dr_reward(mdp, lag, 0, 0, 1)
        base = dr.next_reward - dr.x * dr.f
        base_ab = alpha_beta(mdp.with_reward(next_reward=base), lag.with_reward(next_reward=base), 0, 0, 1)
        for x in RngStream(0).uniform(-10, 10, size=10):
            R = base + x * dr.f
            ab = alpha_beta(mdp.with_reward(next_reward=R), lag.with_reward(next_reward=R), 0, 0, 1)
            assert abs(ab.alpha - (base_ab.alpha + dr.K * x)) <= 1e-12
            assert abs(ab.beta - base_ab.beta) <= 1e-12


class TestFactoredRegime:
    def test_factored_joint_keeps_marginals(self):
        rng = RngStream(0)
        m0, m1 = rng.dirichlet(np.ones(3), size=(2, 2)), rng.dirichlet(np.ones(3), size=(2, 2))
        J = factored_joint([m0, m1], (3, 3), 0.8).reshape(2, 2, 3, 3)
        np.testing.assert_allclose(J.sum(axis=3), m0, atol=1e-12)
        np.testing.assert_allclose(J.sum(axis=2), m1, atol=1e-12)

    def test_separable_reward_beta_zero(self):
        mdp = factored_mdp(rng=RngStream(1))
        assert is_factored(mdp, (5, 5))
        R = separable_reward((5, 5), lambda x: x ** 2, lambda y: y)
        rep = verify_beta_zero(mdp.with_reward(next_reward=R))
        assert rep.factored and rep.max_abs_beta < 1e-6

    def test_cross_reward_beta_nonzero(self):
        mdp = factored_mdp(rng=RngStream(1))
        rep = verify_beta_zero(mdp.with_reward(next_reward=cross_reward((5, 5))))
        assert rep.max_abs_beta > 0.01

    def test_no_noise_beta_zero(self):
        # deterministic next states: the joint already equals the product of its marginals
        S, A = 4, 2
        P = np.zeros((S, A, S))
        for s in range(S):
            for a in range(A):
                P[s, a, (s + a) % S] = 1.0
        mdp = TabularMDP(P, np.zeros((S, A)), 0.9, next_reward=cross_reward((2, 2)), outcome_shape=(2, 2))
        assert verify_beta_zero(mdp).max_abs_beta < 1e-9

    @pytest.mark.parametrize("seed", range(3))
    def test_lagged_q_matches_on_factored(self, seed):
        mdp = factored_mdp(rng=split_rng(RngStream(seed), "mdp"))
        R = separable_reward((5, 5), np.sin, np.cos)
        assert verify_beta_zero(mdp.with_reward(next_reward=R)).max_abs_beta < 1e-6
