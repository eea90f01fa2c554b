import math

import numpy as np
import pytest

from ibta_lab import mine as MI

GAUSS_MI_RHO08 = 0.510825623766  # -0.5*ln(1-0.8^2), closed form


def gauss_pairs(n, rho, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, (n, 1)).astype(np.float32)
    z = rng.normal(0, 1, (n, 1)).astype(np.float32)
    return (rho * x + math.sqrt(1 - rho * rho) * z).astype(np.float32), x


def indep_pairs(n, dim, seed):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(0, 1, (n, dim)).astype(np.float32),
        rng.normal(0, 1, (n, dim)).astype(np.float32),
    )


def fresh_estimator(dim=1, seed=0, **kw):
    cfg = MI.MineConfig(seed=seed, **kw)
    return MI.new_estimator(dim, dim, cfg)


# ---------------------------------------------------------------------------
# dv_estimate


def test_dv_constant_network_is_zero():
    est = fresh_estimator()  # zero head: T is identically 0
    e, x = indep_pairs(64, 1, 0)
    assert MI.dv_estimate(est, (e, x), (e, x[::-1].copy())) == pytest.approx(0.0, abs=1e-7)

    est.stat_net.weights[-1].data = np.array([3.0], dtype=np.float32)  # T = const 3
    assert MI.dv_estimate(est, (e, x), (e, x[::-1].copy())) == pytest.approx(0.0, abs=1e-6)


def test_dv_joint_equals_marginal_nonpositive_up_to_noise():
    est = fresh_estimator(seed=1)
    rng = np.random.default_rng(2)
    for w in est.stat_net.weights:
        w.data = rng.normal(0, 0.3, w.data.shape).astype(np.float32)
    e, x = indep_pairs(512, 1, 3)
    val = MI.dv_estimate(est, (e, x), (e, x))
    assert val <= 0.0 + 1e-7  # same batch on both sides: Jensen exactly


def test_dv_empty_batch_rejected():
    est = fresh_estimator()
    with pytest.raises(ValueError, match="empty"):
        MI.dv_estimate(est, (np.zeros((0, 1)), np.zeros((0, 1))), (np.zeros((1, 1)),) * 2)


def test_dv_bounded_by_clamp():
    est = fresh_estimator(seed=4, clamp=2.0)
    rng = np.random.default_rng(5)
    for w in est.stat_net.weights:
        w.data = rng.normal(0, 5.0, w.data.shape).astype(np.float32)
    e, x = indep_pairs(128, 1, 6)
    val = MI.dv_estimate(est, (e, x), (e, x[::-1].copy()))
    assert abs(val) <= 2 * 2.0 + 1e-5


def test_dv_invariant_under_output_shift():
    est = fresh_estimator(seed=7)
    rng = np.random.default_rng(8)
    for w in est.stat_net.weights:
        w.data = rng.normal(0, 0.2, w.data.shape).astype(np.float32)
    e, x = indep_pairs(256, 1, 9)
    marg = (e, x[::-1].copy())
    before = MI.dv_estimate(est, (e, x), marg)
    est.stat_net.weights[-1].data = est.stat_net.weights[-1].data + np.float32(1.5)
    after = MI.dv_estimate(est, (e, x), marg)
    assert abs(after - before) < 1e-5


# ---------------------------------------------------------------------------
# train_mine


def test_train_gaussian_rho08_hits_closed_form():
    e, x = gauss_pairs(4096, 0.8, 100)
    cfg = MI.MineConfig(train_steps=1200, batch=256, lr=2e-3, seed=0, hidden=64)
    est = MI.train_mine((e, x), cfg)
    assert abs(est.estimate - GAUSS_MI_RHO08) <= 0.1


def test_train_independent_near_zero():
    e, x = indep_pairs(4096, 1, 200)
    cfg = MI.MineConfig(train_steps=1200, batch=256, lr=2e-3, seed=0, hidden=64)
    est = MI.train_mine((e, x), cfg)
    assert -0.05 <= est.estimate <= 0.1


def test_train_discrete_map_approaches_log8():
    rng = np.random.default_rng(0)
    n = 4096
    x = rng.normal(0, 1, (n, 1)).astype(np.float32)
    bins = np.clip(np.argsort(np.argsort(x[:, 0])) * 8 // n, 0, 7)
    e = (np.eye(8, dtype=np.float32)[bins] * 2 - 1).astype(np.float32)
    cfg = MI.MineConfig(train_steps=1200, batch=256, lr=2e-3, seed=0, hidden=64)
    est = MI.train_mine((e, x), cfg)
    assert est.estimate <= math.log(8) + 0.05
    assert est.estimate >= 0.8 * math.log(8)


def test_train_deterministic():
    e, x = gauss_pairs(256, 0.8, 300)
    cfg = MI.MineConfig(train_steps=60, batch=64, lr=1e-3, seed=11, hidden=16)
    a = MI.train_mine((e, x), cfg)
    b = MI.train_mine((e, x), cfg)
    assert a.estimate == b.estimate
    assert a.train_curve == b.train_curve


def test_train_too_few_samples():
    with pytest.raises(ValueError, match="2 samples"):
        MI.train_mine((np.zeros((1, 2)), np.zeros((1, 2))), MI.MineConfig())


def test_param_norm_positive_after_training():
    e, x = gauss_pairs(256, 0.8, 301)
    est = MI.train_mine((e, x), MI.MineConfig(train_steps=30, batch=64, seed=1, hidden=16))
    assert est.param_norm > 0


# ---------------------------------------------------------------------------
# conditional_mi


def test_conditional_single_class():
    e, x = gauss_pairs(80, 0.8, 400)
    cfg = MI.MineConfig(train_steps=100, batch=32, seed=2, hidden=16)
    rep = MI.conditional_mi(e, x, np.zeros(80, dtype=int), cfg)
    assert set(rep.per_class) == {0}
    assert rep.weighted_mean == rep.per_class[0]
    assert rep.sample_counts[0] == 80


def test_conditional_independent_near_zero():
    per, classes = 150, 4
    y = np.repeat(np.arange(classes), per)
    e, x = indep_pairs(per * classes, 16, 500)
    cfg = MI.MineConfig(train_steps=400, batch=64, lr=1e-3, seed=3, hidden=64)
    rep = MI.conditional_mi(e, x, y, cfg)
    assert abs(rep.weighted_mean) <= 0.1


def test_conditional_detects_dependence():
    per, classes = 100, 3
    y = np.repeat(np.arange(classes), per)
    rng = np.random.default_rng(600)
    x = rng.normal(0, 1, (per * classes, 8)).astype(np.float32)
    e = (np.tanh(2 * x) + 0.1 * rng.normal(0, 1, x.shape)).astype(np.float32)
    cfg = MI.MineConfig(train_steps=400, batch=64, lr=1e-3, seed=4, hidden=64)
    rep = MI.conditional_mi(e, x, y, cfg)
    assert rep.weighted_mean > 0.3


def test_conditional_excludes_tiny_classes():
    e, x = indep_pairs(41, 4, 700)
    y = np.array([0] * 40 + [5])
    cfg = MI.MineConfig(train_steps=50, batch=16, seed=5, hidden=8)
    rep = MI.conditional_mi(e, x, y, cfg)
    assert rep.excluded == {5: 1}
    assert set(rep.per_class) == {0}


def test_conditional_weighted_mean_recomputed():
    per = [60, 40]
    y = np.array([0] * per[0] + [1] * per[1])
    e, x = indep_pairs(100, 4, 800)
    cfg = MI.MineConfig(train_steps=60, batch=32, seed=6, hidden=8)
    rep = MI.conditional_mi(e, x, y, cfg)
    manual = (60 * rep.per_class[0] + 40 * rep.per_class[1]) / 100
    assert rep.weighted_mean == pytest.approx(manual, abs=1e-12)
    assert "weighted mean" in rep.to_text()


def test_conditional_length_mismatch():
    with pytest.raises(ValueError, match="equal length"):
        MI.conditional_mi(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros(3), MI.MineConfig())


# ---------------------------------------------------------------------------
# sample_bound


def test_sample_bound_unit_case():
    # 2*(log 16 + 2 + log 2) = 10.931... -> 11
    assert MI.sample_bound(1, 1, 1, 1, 1, 1) == 11


def test_sample_bound_halving_xi_increases():
    n1 = MI.sample_bound(1, 4, 2, 2, 0.5, 0.1)
    n2 = MI.sample_bound(1, 4, 2, 2, 0.25, 0.1)
    assert n2 > n1


def test_sample_bound_delta_limits():
    # delta -> 1 leaves only log 2; delta -> 0 grows without bound
    prev = MI.sample_bound(1, 1, 1, 1, 1, 1)
    assert prev == 11
    for exp in (3, 30, 300):
        n = MI.sample_bound(1, 1, 1, 1, 1, 10.0 ** (-exp))
        assert n > prev
        prev = n
    assert prev > 1000


def test_sample_bound_rejects_nonpositive():
    with pytest.raises(ValueError, match="positive"):
        MI.sample_bound(0, 1, 1, 1, 1, 1)
    with pytest.raises(ValueError, match="exceed 1"):
        MI.sample_bound(1, 1, 1e-3, 1e-3, 10, 1)


def test_sample_bound_monotone_grid():
    rng = np.random.default_rng(900)
    for _ in range(100):
        M = rng.uniform(0.5, 5)
        d = rng.integers(1, 20)
        K = rng.uniform(0.5, 10)
        L = rng.uniform(0.5, 10)
        xi = rng.uniform(0.05, 1.0)
        delta = rng.uniform(0.01, 1.0)
        n = MI.sample_bound(M, d, K, L, xi, delta)
        assert MI.sample_bound(M * 1.5, d, K, L, xi, delta) >= n
        assert MI.sample_bound(M, d + 1, K, L, xi, delta) >= n
        assert MI.sample_bound(M, d, K * 2, L, xi, delta) >= n
        assert MI.sample_bound(M, d, K, L * 2, xi, delta) >= n
        assert MI.sample_bound(M, d, K, L, xi * 0.5, delta) >= n
        assert MI.sample_bound(M, d, K, L, xi, delta * 0.5) >= n


# ---------------------------------------------------------------------------
# persistence


def test_estimator_roundtrip(tmp_path):
    e, x = gauss_pairs(128, 0.8, 1000)
    est = MI.train_mine((e, x), MI.MineConfig(train_steps=30, batch=32, seed=7, hidden=8))
    MI.save_estimator(est, tmp_path / "est")
    back = MI.load_estimator(tmp_path / "est")
    assert back.estimate == est.estimate
    assert back.clamp == est.clamp
    for a, b in zip(est.stat_net.weights, back.stat_net.weights):
        assert np.array_equal(a.data, b.data)
