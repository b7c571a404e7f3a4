import numpy as np
import pytest
from scipy import integrate, stats

from bayeseg.labels import GMM_CODE, GmmMapping
from bayeseg.likelihood import (
    ComponentLayout, HyperPriors, NotPositiveDefinite, Theta, build_constraints, build_dct_basis, cholesky,
    dirichlet_strength, expected_voxels, load_theta, log_dirichlet, log_inverse_wishart, log_prior_theta,
    save_theta, scatter_hyperprior, voxel_likelihood,
)

LAYOUT = ComponentLayout.from_mapping(GmmMapping())


def random_theta(rng, n=2, p=1, layout=LAYOUT):
    g = layout.total
    w = np.empty(g)
    for x in range(layout.n_gmms):
        s = layout.slice(x)
        w[s] = rng.dirichlet(np.ones(s.stop - s.start))
    A = rng.normal(size=(g, n, n))
    covs = A @ np.swapaxes(A, 1, 2) + 0.5 * np.eye(n)
    return Theta(w, rng.normal(size=(g, n)), covs, np.zeros((n, p)), layout)


# ---- basis ---------------------------------------------------------------------------------------

def test_basis_single_constant_column():
    b = build_dct_basis((5, 4, 3), 1)
    m = b.matrix()
    assert m.shape == (60, 1) and np.ptp(m) < 1e-15


def test_basis_sixty_four_lowest_frequencies():
    b = build_dct_basis((9, 7, 8), 4)
    assert b.n_basis == 64 and b.matrix().shape == (504, 64)
    assert np.ptp(b.matrix()[:, 0]) < 1e-15


def test_basis_gram_diagonal():
    m = build_dct_basis((8, 8, 8), 4).matrix()
    g = m.T @ m
    assert np.abs(g - np.diag(np.diag(g))).max() < 1e-8


def test_basis_count_exceeding_axis():
    with pytest.raises(ValueError):
        build_dct_basis((3, 8, 8), 4)
    with pytest.raises(ValueError):
        build_dct_basis((3, 8, 8), 0)


def test_basis_fast_paths_match_dense():
    rng = np.random.default_rng(0)
    b = build_dct_basis((6, 5, 7), 3)
    m = b.matrix()
    c = rng.normal(size=(2, 27))
    assert np.allclose(b.field(c), m @ c.T, atol=1e-12)
    v = rng.normal(size=b.size)
    assert np.allclose(b.project(v), m.T @ v, atol=1e-10)
    w = rng.random(b.size)
    assert np.allclose(b.gram(w), m.T @ (w[:, None] * m), atol=1e-10)


# ---- densities -----------------------------------------------------------------------------------

def _one_gmm(weights, means, covs, p=1):
    lay = ComponentLayout((len(weights),))
    return Theta(np.array(weights, float), np.array(means, float), np.array(covs, float),
                 np.zeros((np.shape(means)[1], p)), lay)


def test_standard_normal_peak():
    t = _one_gmm([1.0], [[0.0]], [[[1.0]]])
    assert voxel_likelihood([0.0], 0, t) == pytest.approx(1 / np.sqrt(2 * np.pi), abs=1e-15)


def test_identical_components_collapse():
    one = _one_gmm([1.0], [[0.3, -1]], [[[2, 0.4], [0.4, 1]]])
    two = _one_gmm([0.5, 0.5], [[0.3, -1]] * 2, [[[2, 0.4], [0.4, 1]]] * 2)
    for d in ([0, 0], [1.5, -2]):
        assert voxel_likelihood(d, 0, one) == pytest.approx(voxel_likelihood(d, 0, two), rel=1e-14)


def test_density_matches_formula():
    rng = np.random.default_rng(1)
    t = random_theta(rng)
    for x in (0, GMM_CODE["CSF"], GMM_CODE["GWM"]):
        s = LAYOUT.slice(x)
        for d in rng.normal(size=(4, 2)):
            want = 0.0
            for g in range(s.start, s.stop):
                S = t.covs[g]
                r = d - t.means[g]
                q = r @ np.linalg.inv(S) @ r
                want += t.weights[g] * np.exp(-0.5 * q) / (2 * np.pi * np.sqrt(np.linalg.det(S)))
            assert voxel_likelihood(d, x, t) == pytest.approx(want, rel=1e-12)


def test_density_integrates_to_one():
    t = _one_gmm([0.3, 0.7], [[-1.0], [2.0]], [[[0.5]], [[1.7]]])
    val, _ = integrate.quad(lambda d: voxel_likelihood([d], 0, t), -30, 30, limit=200)
    assert val == pytest.approx(1.0, abs=1e-9)


def test_bias_is_a_pure_mean_shift():
    rng = np.random.default_rng(2)
    t = random_theta(rng, p=4)
    C = rng.normal(size=(2, 4))
    tc = t.update(bias=C)
    phi = rng.normal(size=4)
    d = rng.normal(size=2)
    for x in range(12):
        assert voxel_likelihood(d, x, tc, phi) == voxel_likelihood(d - C @ phi, x, t)


def test_non_spd_covariance_rejected():
    with pytest.raises(NotPositiveDefinite):
        cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))
    # a singular matrix survives through jitter
    L = cholesky(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert np.all(np.isfinite(L))


# ---- constraints ---------------------------------------------------------------------------------

def test_constraint_row_counts():
    assert build_constraints(["FLAIR", "T1c", "T2"], LAYOUT).n_rows == 12
    assert build_constraints(["T2"], LAYOUT).n_rows == 0
    assert build_constraints(["T1c", "T2"], LAYOUT).n_rows == 2 + 2
    assert build_constraints(["FLAIR", "T2"], LAYOUT).n_rows == 2 + 2 + 2 + 2


def test_rows_never_reference_absent_channels():
    tags = ["FLAIR", "T1c", "T2"]
    cs = build_constraints(["T1c", "T2"], LAYOUT)
    used = np.flatnonzero(np.abs(cs.A).sum(axis=0)) % 2
    assert set(used.tolist()) == {0}  # channel 0 is T1c in the reduced system
    cs3 = build_constraints(tags, LAYOUT)
    used3 = set((np.flatnonzero(np.abs(cs3.A).sum(axis=0)) % 3).tolist())
    assert 2 not in used3


def _comfortable_means(n_ch=3):
    mu = np.zeros((LAYOUT.total, n_ch))
    mu[LAYOUT.slice(GMM_CODE["GWM"])] = 1.0
    mu[LAYOUT.slice(GMM_CODE["GGM"])] = 1.1
    mu[LAYOUT.slice(GMM_CODE["edema"])] = 1.1 + np.log(1.3)
    mu[LAYOUT.slice(GMM_CODE["core"]).start] = 1.1 + np.log(1.3)
    mu[LAYOUT.slice(GMM_CODE["unspecified"])] = 1.0 - np.log(1.2)
    mu[LAYOUT.slice(GMM_CODE["optic-chiasm"])] = 0.5
    return mu


def test_feasible_substitution():
    cs = build_constraints(["FLAIR", "T1c", "T2"], LAYOUT)
    mu = _comfortable_means()
    assert cs.satisfied(mu.reshape(-1))
    mu[LAYOUT.slice(GMM_CODE["GGM"]), 0] = 1.0
    e = LAYOUT.slice(GMM_CODE["edema"]).start
    mu[e, 0] = 1.0 + np.log(1.2)
    assert cs.satisfied(mu.reshape(-1))
    mu[e, 0] = 1.0 + np.log(1.1)
    assert not cs.satisfied(mu.reshape(-1))


def test_flair_like_tags_share_rows():
    a = build_constraints(["FLAIR2", "T1c"], LAYOUT)
    b = build_constraints(["FLAIR", "T1c"], LAYOUT)
    assert np.array_equal(a.A, b.A) and np.array_equal(a.b, b.b)


# ---- hyperpriors ---------------------------------------------------------------------------------

def test_dirichlet_strength():
    assert dirichlet_strength(10 ** 4) == pytest.approx(2.0)
    assert dirichlet_strength(0) == 1.0
    assert dirichlet_strength(64 ** 3) == pytest.approx(27.2144, abs=1e-12)


def test_scatter_hyperprior():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(500, 3)) * [1, 2, 3]
    S, nu = scatter_hyperprior(d, 3, 3000)
    assert nu == pytest.approx(103.0)
    assert np.allclose(S, np.diag(103 * d.var(axis=0) / 144))
    Sw, _ = scatter_hyperprior(d, 3, 3000, wide=True)
    assert np.allclose(np.diag(Sw) / np.diag(S), 144)
    S0, _ = scatter_hyperprior(np.ones((50, 2)), 1, 10)
    assert np.all(np.diag(S0) == 1e-8)
    with pytest.raises(ValueError):
        scatter_hyperprior(d, 1, 0)


def test_expected_voxels_split():
    atlas = np.zeros((1000, 17))
    atlas[:, 0] = 1.0
    ix = expected_voxels(atlas, GmmMapping(), 0.1, 0.3)
    assert ix[GMM_CODE["edema"]] == pytest.approx(70) and ix[GMM_CODE["core"]] == pytest.approx(30)
    assert ix[GMM_CODE["GWM"]] == 1000
    assert ix[GMM_CODE["background"]] == 1.0  # floored


def test_log_densities_match_scipy():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(3, 3))
    Sig = A @ A.T + np.eye(3)
    S = np.diag([0.5, 1.0, 2.0])
    for nu in (4.5, 10.0, 103.0):
        assert log_inverse_wishart(Sig, nu, S) == pytest.approx(stats.invwishart(df=nu, scale=S).logpdf(Sig), abs=1e-10)
    g = rng.dirichlet(np.ones(3))
    assert log_dirichlet(g, 2.7) == pytest.approx(stats.dirichlet(np.full(3, 2.7)).logpdf(g), abs=1e-10)


def test_iw_mode():
    S = np.diag([1.0, 2.0])
    nu = 7.0
    mode = S / (nu + 3)
    f0 = log_inverse_wishart(mode, nu, S)
    for sc in (0.9, 1.1):
        assert log_inverse_wishart(mode * sc, nu, S) < f0


def test_log_prior_theta():
    rng = np.random.default_rng(4)
    t = random_theta(rng, n=3)
    t = t.update(means=_comfortable_means())
    cons = build_constraints(["FLAIR", "T1c", "T2"], LAYOUT)
    scat = np.array([np.diag(rng.random(3) + 0.1) for _ in range(12)])
    nu = rng.uniform(5, 50, 12)
    hyper = HyperPriors(3.3, scat, nu, cons)
    want = 0.0
    for x in range(12):
        s = LAYOUT.slice(x)
        if s.stop - s.start > 1:
            want += stats.dirichlet(np.full(s.stop - s.start, 3.3)).logpdf(t.weights[s])
        for g in range(s.start, s.stop):
            want += stats.invwishart(df=nu[x], scale=scat[x]).logpdf(t.covs[g])
    assert log_prior_theta(t, hyper) == pytest.approx(want, abs=1e-10)
    bad = np.array(t.means)
    bad[LAYOUT.slice(GMM_CODE["edema"]).start, 0] = -5.0
    assert log_prior_theta(t.update(means=bad), hyper) == -np.inf


def test_flat_dirichlet_constant():
    a = log_dirichlet(np.array([0.2, 0.8]), 1.0)
    b = log_dirichlet(np.array([0.6, 0.4]), 1.0)
    assert a == b


def test_theta_checkpoint_round_trip(tmp_path):
    t = random_theta(np.random.default_rng(5), n=3, p=8)
    t = t.update(bias=np.arange(24.0).reshape(3, 8))
    save_theta(t, tmp_path / "theta.bin", ("FLAIR", "T1c", "T2"))
    u, header = load_theta(tmp_path / "theta.bin")
    assert header["channels"] == ["FLAIR", "T1c", "T2"]
    for a in ("weights", "means", "covs", "bias"):
        assert np.array_equal(getattr(t, a), getattr(u, a))


def test_theta_validation():
    rng = np.random.default_rng(6)
    t = random_theta(rng)
    w = np.array(t.weights)
    w[0] += 0.1
    with pytest.raises(ValueError):
        t.update(weights=w)
