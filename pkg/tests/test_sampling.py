import numpy as np
import pytest
from scipy.stats import invwishart

import oracles
from bayeseg.qp import InfeasibleConstraints, kkt_residual, solve_constrained_means
from bayeseg.sampling import (
    coordinate_bounds, sample_dirichlet, sample_inverse_wishart, sample_truncated_mvn, truncnorm_ppf,
)


# ---- constrained means ---------------------------------------------------------------------------

def test_qp_feasible_unconstrained_mode_returned():
    A = np.array([[1.0, -1.0]])
    res = solve_constrained_means([0.0, 1.0], np.eye(2), A, [0.0])
    assert np.array_equal(res.mu, [0.0, 1.0])
    assert not res.active.any()


def test_qp_one_dimensional_projection():
    res = solve_constrained_means([2.0], [[1.0]], [[1.0]], [1.0])
    assert res.mu[0] == pytest.approx(1.0, abs=1e-12)
    assert res.active.all()


def test_qp_two_means_ordered():
    # mu1 <= mu2 with m = (0.25, -0.25) and identity covariance
    res = solve_constrained_means([0.25, -0.25], np.eye(2), [[1.0, -1.0]], [0.0])
    assert np.allclose(res.mu, [0.0, 0.0], atol=1e-12)
    res = solve_constrained_means([0.5, 0.0], np.eye(2), [[1.0, -1.0]], [0.0])
    assert np.allclose(res.mu, [0.25, 0.25], atol=1e-12)
    assert res.multipliers[0] == pytest.approx(0.25, abs=1e-12)


def test_qp_weighted_projection_leans_on_loose_mean():
    # the mean with larger covariance moves further
    res = solve_constrained_means([1.0, 0.0], np.diag([1.0, 3.0]), [[1.0, -1.0]], [0.0])
    assert np.allclose(res.mu, [0.75, 0.75], atol=1e-12)


def test_qp_random_systems_satisfy_kkt():
    r = oracles.qp_kkt_residuals(100, seed=4)
    assert r.max() < 1e-6


def test_qp_block_stack_equals_dense():
    rng = np.random.default_rng(5)
    m, S, A, b = oracles.random_qp(rng, dim=4, rows=3)
    blocks = np.stack([S[:2, :2], S[2:, 2:]])
    S2 = np.zeros_like(S)
    S2[:2, :2], S2[2:, 2:] = blocks
    a = solve_constrained_means(m, S2, A, b)
    c = solve_constrained_means(m, blocks, A, b)
    assert np.allclose(a.mu, c.mu, atol=1e-12)


def test_qp_fixed_entries_held():
    res = solve_constrained_means([3.0, 0.0], np.eye(2), [[1.0, -1.0]], [0.0], fixed=[False, True], x0=[0.0, 2.0])
    assert np.allclose(res.mu, [2.0, 2.0])


def test_qp_infeasible_raises():
    with pytest.raises(InfeasibleConstraints):
        solve_constrained_means([0.0], [[1.0]], [[1.0], [-1.0]], [-1.0, -1.0])


def test_kkt_residual_detects_bad_point():
    assert kkt_residual([0.0], [0.0], [[1.0]], [[1.0]], [1.0], [0.0]) == 0.0
    assert kkt_residual([2.0], [0.0], [[1.0]], [[1.0]], [1.0], [0.0]) > 0.5


# ---- truncated normals ---------------------------------------------------------------------------

def test_truncnorm_ppf_matches_scipy():
    from scipy.stats import truncnorm

    u = np.array([0.001, 0.3, 0.5, 0.9, 0.999])
    for lo, hi in ((-1.0, 2.0), (3.0, np.inf), (-np.inf, -4.0), (8.0, 9.0), (-np.inf, np.inf)):
        got = np.array([truncnorm_ppf(x, lo, hi) for x in u])
        assert np.allclose(got, truncnorm.ppf(u, lo, hi), atol=1e-8)
        assert np.all((got >= lo) & (got <= hi))


def test_coordinate_bounds():
    A = np.array([[1.0, 1.0], [-1.0, 0.0], [0.0, 1.0]])
    b = np.array([2.0, 1.0, 5.0])
    lo, hi = coordinate_bounds(A, b, np.array([0.0, 0.5]), 0)
    assert (lo, hi) == (-1.0, 1.5)
    lo, hi = coordinate_bounds(A, b, np.array([0.0, 0.5]), 1)
    assert (lo, hi) == (-np.inf, 2.0)


def test_half_normal_mean():
    mean, se = oracles.half_normal(20_000, seed=1)
    assert abs(mean - np.sqrt(2 / np.pi)) < 3 * se


def test_two_dim_chain_matches_rejection():
    cm, cse, rm, rse = oracles.tmvn_2d(20_000, seed=2, n_ref=400_000)
    assert np.all(np.abs(cm - rm) < 3 * np.hypot(cse, rse))


def test_chain_stays_feasible():
    rng = np.random.default_rng(3)
    mu = np.array([0.5, 0.5])
    for _ in range(500):
        mu = sample_truncated_mvn(oracles.TMVN_M, oracles.TMVN_S, oracles.TMVN_A, oracles.TMVN_B, mu, rng)
        assert np.all(oracles.TMVN_A @ mu <= oracles.TMVN_B + 1e-12)


def test_no_constraints_gives_unconstrained_moments():
    rng = np.random.default_rng(4)
    S = np.array([[1.0, 0.4], [0.4, 0.5]])
    mu = np.zeros(2)
    out = np.empty((20_000, 2))
    for i in range(len(out)):
        mu = sample_truncated_mvn([1.0, -1.0], S, np.zeros((0, 2)), np.zeros(0), mu, rng)
        out[i] = mu
    assert np.all(np.abs(out.mean(axis=0) - [1.0, -1.0]) < 3 * oracles.batch_se(out))
    assert np.allclose(np.cov(out.T), S, atol=0.05)


def test_inactive_rows_change_nothing():
    S = np.array([[1.0, 0.3], [0.3, 2.0]])
    big = np.array([[1.0, 0.0], [0.0, -1.0]])
    a = sample_truncated_mvn([0.0, 0.0], S, np.zeros((0, 2)), np.zeros(0), [0.1, 0.1], np.random.default_rng(9))
    b = sample_truncated_mvn([0.0, 0.0], S, big, [np.inf, np.inf], [0.1, 0.1], np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_infeasible_start_rejected():
    with pytest.raises(ValueError, match="violates"):
        sample_truncated_mvn([0.0], [[1.0]], [[1.0]], [0.0], [0.5], np.random.default_rng(0))


def test_frozen_coordinates_untouched():
    mu = sample_truncated_mvn([5.0, 5.0], np.eye(2), np.zeros((0, 2)), np.zeros(0), [1.0, 2.0],
                              np.random.default_rng(0), frozen=[True, False])
    assert mu[0] == 1.0 and mu[1] != 2.0


# ---- conjugate draws -----------------------------------------------------------------------------

def test_inverse_wishart_draw_mean():
    rng = np.random.default_rng(6)
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    draws = np.array([sample_inverse_wishart(S, 9.0, rng) for _ in range(8000)])
    assert np.allclose(draws.mean(axis=0), invwishart(df=9.0, scale=S).mean(), rtol=0.04, atol=0.01)


def test_dirichlet_singleton_is_one():
    assert sample_dirichlet([3.0], np.random.default_rng(0)).tolist() == [1.0]


def test_covariance_conjugacy_in_sweep():
    sig, sig_ref, mu, mu_ref = oracles.covariance_conjugacy(8000, seed=1)
    assert sig == pytest.approx(sig_ref, rel=0.02)
    assert mu == pytest.approx(mu_ref, abs=0.02 * max(1.0, abs(mu_ref)))


def test_weight_conjugacy_in_sweep():
    mean, ref, var, var_ref = oracles.dirichlet_conjugacy(6000, seed=2)
    assert np.allclose(mean, ref, rtol=0.02)
    assert np.allclose(var, var_ref, rtol=0.1)


def test_flat_weights_for_empty_mixture():
    mean, se = oracles.flat_dirichlet(4000, seed=3)
    assert np.all(np.abs(mean - 0.5) < 3 * se)


def test_bias_conditional_matches_dense_form():
    mean, mean_ref, sd, sd_ref = oracles.bias_conjugacy(6000, seed=0)
    assert np.all(np.abs(mean - mean_ref) < 0.02 * np.abs(mean_ref) + 4 * sd_ref / np.sqrt(6000))
    assert np.allclose(sd, sd_ref, rtol=0.05)
