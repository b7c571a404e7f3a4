import numpy as np
import pytest
from scipy.special import expit, logsumexp

import oracles
from bayeseg import crbm
from bayeseg.crbm import CrbmParams, TrainConfig
from bayeseg.phantom import mask_corpus


# ---- energy and free energy ----------------------------------------------------------------------

def test_energy_zero_state():
    p, shape = oracles.crbm_tiny()
    H = np.zeros((2,) + p.hidden_shape(shape))
    assert crbm.energy(p, np.zeros(shape), H) == 0.0


def test_energy_visible_bias_arithmetic():
    p = CrbmParams.zeros(2, (2, 2, 2), visible_bias=0.3)
    v = np.zeros((4, 4, 4))
    v[0, 0, :] = 1
    H = np.zeros((2, 3, 3, 3))
    assert crbm.energy(p, v, H) == pytest.approx(-1.2, abs=1e-12)


def test_energy_matches_loop_oracle():
    p, shape = oracles.crbm_tiny(seed=4)
    rng = np.random.default_rng(9)
    for _ in range(5):
        v = rng.integers(0, 2, shape).astype(float)
        H = rng.integers(0, 2, (2,) + p.hidden_shape(shape)).astype(float)
        pre = oracles.crbm_loop_pre(p, v)
        want = -(H[:, :, 0, 0] * pre).sum() - p.visible_bias * v.sum()
        assert crbm.energy(p, v, H) == pytest.approx(want, abs=1e-10)


def test_energy_shape_mismatch():
    p, shape = oracles.crbm_tiny()
    with pytest.raises(ValueError):
        crbm.energy(p, np.zeros(shape), np.zeros((2, 4, 1, 1)))


def test_free_energy_of_empty_mask():
    p = CrbmParams(np.random.default_rng(0).normal(size=(3, 2, 2, 2)), np.zeros(3), 0.7)
    n_hidden = 3 * 3 * 3 * 3
    assert crbm.free_energy(p, np.zeros((4, 4, 4))) == pytest.approx(-n_hidden * np.log(2), abs=1e-10)


def test_free_energy_matches_enumeration():
    p, shape = oracles.crbm_tiny(seed=1)
    vs, hs, log_t = oracles.crbm_joint_table(p, shape)
    want = -logsumexp(log_t, axis=1)
    got = np.array([crbm.free_energy(p, v.reshape(shape)) for v in vs])
    assert np.abs(got - want).max() < 1e-10


def test_free_energy_constant_for_degenerate_model():
    p = CrbmParams.zeros(2, (2, 2, 2))
    rng = np.random.default_rng(0)
    vals = {round(crbm.free_energy(p, rng.integers(0, 2, (4, 4, 4))), 12) for _ in range(5)}
    assert len(vals) == 1


# ---- conditionals --------------------------------------------------------------------------------

def test_conditionals_match_enumerated_joint():
    p, shape = oracles.crbm_tiny(seed=2)
    vs, hs, log_t = oracles.crbm_joint_table(p, shape)
    hshape = (2,) + p.hidden_shape(shape)
    # p(h_u = 1 | v) from the joint table
    for vi in (0, 37, 100, 127):
        w = np.exp(log_t[vi] - logsumexp(log_t[vi]))
        want = w @ hs
        got = crbm.hidden_activation(p, vs[vi].reshape(shape)).reshape(-1)
        assert np.abs(got - want).max() < 1e-10
    # p(v_i = 1 | H)
    for hi in (0, 5, 333, 1023):
        col = log_t[:, hi]
        w = np.exp(col - logsumexp(col))
        want = w @ vs
        got = crbm.visible_activation(p, hs[hi].reshape(hshape), shape).reshape(-1)
        assert np.abs(got - want).max() < 1e-10


def test_hidden_activation_degenerate_cases():
    v = np.random.default_rng(0).integers(0, 2, (5, 5, 5))
    assert np.all(crbm.hidden_activation(CrbmParams.zeros(2, (2, 2, 2)), v) == 0.5)
    p = CrbmParams(np.zeros((2, 2, 2, 2)), np.full(2, -20.0), 0.0)
    assert crbm.hidden_activation(p, v).max() < 1e-8


def test_sample_hidden_monte_carlo():
    base, shape = oracles.crbm_tiny(seed=3)
    reps = 500
    p = CrbmParams(np.repeat(base.filters, reps, axis=0), np.repeat(base.hidden_bias, reps), 0.0)
    v = np.array([1, 0, 1, 1, 0, 0, 1], dtype=float).reshape(shape)
    rng = np.random.default_rng(5)
    draws = 200
    acc = np.zeros((p.n_filters,) + p.hidden_shape(shape))
    for _ in range(draws):
        acc += crbm.sample_hidden(p, v, rng)
    n = reps * draws
    emp = acc.reshape(2, reps, -1).sum(axis=1) / n
    want = expit(oracles.crbm_loop_pre(base, v))
    sd = np.sqrt(want * (1 - want) / n)
    assert np.all(np.abs(emp - want) < 3 * sd + 1e-12)


def test_visible_zero_state():
    p = CrbmParams.zeros(2, (2, 2, 2))
    assert np.all(crbm.visible_activation(p, np.zeros((2, 3, 3, 3))) == 0.5)


def test_adjoint_identity():
    rng = np.random.default_rng(11)
    p = CrbmParams(rng.normal(size=(3, 3, 2, 4)), np.zeros(3), 0.0)
    v = rng.integers(0, 2, (7, 6, 9)).astype(float)
    H = rng.integers(0, 2, (3,) + p.hidden_shape(v.shape)).astype(float)
    lhs = (H * crbm.hidden_input(p, v)).sum()
    rhs = (v * crbm.visible_input(p, H, v.shape)).sum()
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_delta_filter_single_hidden_unit():
    w = np.zeros((1, 3, 3, 3))
    w[0, 1, 2, 0] = 1.7
    p = CrbmParams(w, np.zeros(1), -0.4)
    H = np.zeros((1, 4, 4, 4))
    H[0, 2, 1, 3] = 1
    act = crbm.visible_activation(p, H, (6, 6, 6))
    want = np.full((6, 6, 6), expit(-0.4))
    want[3, 3, 3] = expit(1.7 - 0.4)
    assert np.abs(act - want).max() < 1e-12


def test_pairwise_degeneracy_for_width_two_filters():
    rng = np.random.default_rng(6)
    p = CrbmParams(rng.normal(size=(3, 2, 1, 1)), rng.normal(size=3), 0.3)
    w0, w1 = p.filters[:, 0, 0, 0], p.filters[:, 1, 0, 0]
    phi = {(s, t): -np.log1p(np.exp(w0 * s + w1 * t + p.hidden_bias)).sum() for s in (0, 1) for t in (0, 1)}
    for v in oracles.all_binary(8):
        pairwise = sum(phi[int(v[i]), int(v[i + 1])] for i in range(7)) - 0.3 * v.sum()
        assert crbm.free_energy(p, v.reshape(8, 1, 1)) == pytest.approx(pairwise, abs=1e-10)


# ---- gradients -----------------------------------------------------------------------------------

def test_matched_statistics_give_zero_gradient():
    rng = np.random.default_rng(0)
    p = CrbmParams(rng.normal(size=(2, 2, 2, 2)), rng.normal(size=2), 0.1, (2, 2, 2))
    vs = [rng.integers(0, 2, (5, 5, 5)) for _ in range(3)]
    for enhanced in (False, True):
        g = crbm.cd_statistics(p, vs, vs, enhanced)
        assert np.abs(g.flat()).max() < 1e-12


def test_tied_blocks_stay_tied():
    rng = np.random.default_rng(1)
    cfg = TrainConfig(n_filters=2, filter_shape=(4, 4, 2), block=(2, 2, 2), steps=0)
    p = crbm.init_params(cfg, rng)
    g = crbm.cd1_gradient(p, [rng.integers(0, 2, (8, 8, 8)) for _ in range(2)], rng)
    blocks = g.filters.reshape(2, 2, 2, 2, 2, 1, 2)
    assert np.abs(blocks - blocks[:, :, :1, :, :1, :, :1]).max() < 1e-15
    w = p.filters.reshape(2, 2, 2, 2, 2, 1, 2)
    assert np.abs(w - w[:, :, :1, :, :1, :, :1]).max() == 0


def test_cd_filter_gradient_matches_free_energy_derivative():
    # with negatives fixed, the data-minus-model term is -dF/dw(pos) + dF/dw(neg)
    rng = np.random.default_rng(7)
    p = CrbmParams(rng.normal(0, 0.3, (2, 2, 2, 2)), rng.normal(size=2), 0.1)
    pos = [rng.integers(0, 2, (4, 4, 4)).astype(float)]
    neg = [rng.integers(0, 2, (4, 4, 4)).astype(float)]
    g = crbm.cd_statistics(p, pos, neg, enhanced=False)
    eps = 1e-6
    n_hidden = 27  # gradients are per hidden unit of one group
    num = np.zeros_like(p.filters)
    for idx in np.ndindex(p.filters.shape):
        w = np.array(p.filters)
        w[idx] += eps
        hi = CrbmParams(w, p.hidden_bias, p.visible_bias)
        w[idx] -= 2 * eps
        lo = CrbmParams(w, p.hidden_bias, p.visible_bias)
        f = lambda q: -crbm.free_energy(q, pos[0]) + crbm.free_energy(q, neg[0])
        num[idx] = (f(hi) - f(lo)) / (2 * eps) / n_hidden
    assert np.abs(g.filters - num).max() < 1e-8


def _flip_visible(p):
    """Parameters describing the same model over 1 - v."""
    return CrbmParams(-p.filters, p.hidden_bias + p.filters.sum(axis=(1, 2, 3)), -p.visible_bias, p.block)


def test_enhanced_gradient_bit_flip_invariance():
    rng = np.random.default_rng(8)
    p = CrbmParams(rng.normal(0, 0.4, (2, 2, 2, 2)), rng.normal(size=2), 0.3)
    q = _flip_visible(p)
    pos = [rng.integers(0, 2, (5, 5, 5)).astype(float) for _ in range(3)]
    neg = [rng.random((5, 5, 5)) for _ in range(3)]
    # the flipped model really is the same distribution
    assert crbm.free_energy(p, pos[0]) - crbm.free_energy(q, 1 - pos[0]) == pytest.approx(
        crbm.free_energy(p, pos[1]) - crbm.free_energy(q, 1 - pos[1]), abs=1e-10)
    g = crbm.cd_statistics(p, pos, neg, enhanced=True)
    gq = crbm.cd_statistics(q, [1 - v for v in pos], [1 - v for v in neg], enhanced=True)
    assert np.abs(gq.filters + g.filters).max() < 1e-12
    # b' = b + sum(w), so its update carries the filter update's sum
    assert np.abs(gq.hidden_bias - (g.hidden_bias + g.filters.sum(axis=(1, 2, 3)))).max() < 1e-12
    # the plain gradient is not invariant
    s = crbm.cd_statistics(p, pos, neg, enhanced=False)
    sq = crbm.cd_statistics(q, [1 - v for v in pos], [1 - v for v in neg], enhanced=False)
    assert np.abs(sq.filters + s.filters).max() > 1e-3


def test_cd1_against_exact_gradient_cosine():
    p, shape = oracles.crbm_tiny(seed=5, n=6)
    vs = oracles.all_binary(6)
    fe = np.array([crbm.free_energy(p, v.reshape(shape)) for v in vs])
    pm = np.exp(-fe - logsumexp(-fe))
    rng = np.random.default_rng(0)
    data = [vs[i].reshape(shape) for i in rng.choice(len(vs), 6, p=pm[::-1] / pm.sum())]

    def dfw(v):
        pre = expit(crbm.hidden_input(p, v))[:, :, 0, 0]
        j = pre.shape[1]
        return np.stack([[pre[m] @ v[t:t + j, 0, 0] for t in range(3)] for m in range(2)])

    exact = np.mean([dfw(v) for v in data], axis=0) - sum(pm[i] * dfw(vs[i].reshape(shape)) for i in range(len(vs)))
    cd = np.mean([crbm.cd1_gradient(p, data, np.random.default_rng(s), enhanced=False).filters[:, :, 0, 0]
                  for s in range(400)], axis=0)
    cos = float((exact * cd).sum() / np.linalg.norm(exact) / np.linalg.norm(cd))
    print(f"CD-1 vs exact filter gradient cosine similarity: {cos:.3f}")
    assert np.isfinite(cos)


# ---- training ------------------------------------------------------------------------------------

def test_zero_steps_returns_initialization():
    cfg = TrainConfig(n_filters=2, filter_shape=(2, 2, 2), block=(1, 1, 1), steps=0, seed=3)
    corpus = [np.zeros((4, 4, 4))]
    p = crbm.train_crbm(corpus, cfg)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([3, 8])))
    q = crbm.init_params(cfg, rng)
    assert np.array_equal(p.filters, q.filters) and np.array_equal(p.hidden_bias, q.hidden_bias)


def test_config_inconsistent_with_tying():
    with pytest.raises(ValueError):
        TrainConfig(filter_shape=(5, 4, 4), block=(2, 2, 2))


def test_identical_masks_preferred_over_complement():
    mask = np.zeros((8, 8, 8))
    mask[2:6, 2:5, 3:7] = 1
    cfg = TrainConfig(n_filters=2, filter_shape=(2, 2, 2), block=(1, 1, 1), steps=60, step_size=0.1, minibatch=4)
    p = crbm.train_crbm([mask] * 4, cfg)
    assert crbm.free_energy(p, mask) < crbm.free_energy(p, 1 - mask)


def test_desk_scale_training_decreases_free_energy_and_is_deterministic():
    masks = mask_corpus(3, (32, 32, 32), seed=4)
    corpus = crbm.augmented_corpus([m[0] for m in masks])
    cfg = TrainConfig(n_filters=4, filter_shape=(6, 6, 6), block=(2, 2, 2), steps=24, step_size=0.1, minibatch=4,
                      seed=2)
    p = crbm.train_crbm(corpus, cfg, holdout=masks[0][1])
    fe = [e["train_free_energy"] for e in p.metadata["log"]]
    half = len(fe) // 2
    assert np.mean(fe[half:]) < np.mean(fe[:half])
    assert "holdout_free_energy" in p.metadata["log"][-1]
    q = crbm.train_crbm(corpus, cfg, holdout=masks[0][1])
    assert p.filters.tobytes() == q.filters.tobytes() and p.visible_bias == q.visible_bias


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    p = CrbmParams(rng.normal(size=(3, 4, 4, 2)), rng.normal(size=3), -1.25, (2, 2, 2), {"seed": 5})
    path = crbm.save_checkpoint(p, tmp_path / "z.crbm")
    q = crbm.load_checkpoint(path)
    assert np.array_equal(p.filters, q.filters) and np.array_equal(p.hidden_bias, q.hidden_bias)
    assert q.visible_bias == -1.25 and q.block == (2, 2, 2) and q.metadata["seed"] == 5
    (tmp_path / "bad.crbm").write_bytes(b"nope")
    with pytest.raises(ValueError):
        crbm.load_checkpoint(tmp_path / "bad.crbm")
