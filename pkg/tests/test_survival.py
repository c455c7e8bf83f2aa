import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prismsurv import diffcore as dc
from prismsurv import survival as sv
from prismsurv import synthgen as sg


def _brute_nll(theta, X, t, e, lam):
    eta = X @ theta
    out = 0.0
    for i in range(len(t)):
        if e[i]:
            out -= eta[i] - math.log(np.exp(eta[t >= t[i]]).sum())
    return out + lam * theta @ theta


def _planted(n, theta, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, len(theta)))
    t, e = sg.sample_survival(X, np.asarray(theta), 0.1, (5.0, 40.0), rng)
    return X, t, e


def test_fuse_features():
    assert sv.fuse_features(np.zeros(41), np.zeros(64)).shape == (105,)
    e = np.arange(3.0)
    np.testing.assert_array_equal(sv.fuse_features(e, np.zeros(0)), e)
    assert sv.fuse_features(e, [1.0]).tobytes() == sv.fuse_features(e, [1.0]).tobytes()
    with pytest.raises(ValueError):
        sv.fuse_features([np.nan], [1.0])


def test_nll_hand_value():
    assert sv.cox_nll([0.0], np.zeros((2, 1)), [1, 2], [1, 1]) == pytest.approx(math.log(2), abs=1e-15)
    theta = np.array([0.3, -0.2])
    assert sv.cox_nll(theta, np.ones((3, 2)), [1, 2, 3], [0, 0, 0], 0.5) == pytest.approx(0.5 * 0.13)


@pytest.mark.parametrize("seed", range(4))
def test_nll_matches_brute_force_with_ties(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 3))
    t = rng.integers(1, 8, 30).astype(float)
    e = rng.integers(0, 2, 30)
    theta = rng.normal(size=3)
    assert sv.cox_nll(theta, X, t, e, 0.1) == pytest.approx(_brute_nll(theta, X, t, e, 0.1), rel=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_tape_gradient_matches_fd_and_newton_derivs(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(25, 4))
    t = rng.integers(1, 10, 25).astype(float)
    e = rng.integers(0, 2, 25)
    lam = 0.05
    err = dc.finite_diff_check(lambda p: sv.cox_nll_tensor(p["theta"], X, t, e, lam),
                               {"theta": rng.normal(size=4)})
    assert err < 1e-6
    theta = rng.normal(size=4)
    val, grads = dc.value_and_grad(lambda p: sv.cox_nll_tensor(p["theta"], X, t, e, lam), {"theta": theta})
    f, g, _ = sv.cox_nll_grad_hess(theta, X, t, e, lam)
    assert val == pytest.approx(f, rel=1e-12)
    np.testing.assert_allclose(grads["theta"], g, rtol=1e-10, atol=1e-12)


def test_hessian_matches_fd_of_gradient():
    X, t, e = _planted(60, [0.5, -0.3, 0.2], 1)
    theta = np.array([0.1, 0.2, -0.1])
    _, _, H = sv.cox_nll_grad_hess(theta, X, t, e)
    h = 1e-6
    num = np.column_stack([(sv.cox_nll_grad_hess(theta + h * u, X, t, e)[1]
                            - sv.cox_nll_grad_hess(theta - h * u, X, t, e)[1]) / (2 * h) for u in np.eye(3)])
    np.testing.assert_allclose(H, num, rtol=1e-6, atol=1e-6)


def test_convexity_along_random_directions():
    X, t, e = _planted(80, [1.0, -0.5, 0.3], 2)
    rng = np.random.default_rng(0)
    for _ in range(100):
        th, d = rng.normal(size=3), rng.normal(size=3)
        _, _, H = sv.cox_nll_grad_hess(th, X, t, e)
        assert d @ H @ d >= -1e-10


@pytest.mark.parametrize("seed", range(5))
def test_recovers_planted_coefficients(seed):
    X, t, e = _planted(500, [1.0, -0.5], 100 + seed)
    m = sv.fit_cox(X, t, e, lam=1e-4)
    assert m.converged and m.n_iter < 25
    np.testing.assert_allclose(m.theta, [1.0, -0.5], atol=0.15)


def test_constant_column_gets_zero_weight():
    X, t, e = _planted(100, [0.8], 3)
    X = np.column_stack([X, np.ones(100)])
    m = sv.fit_cox(X, t, e, lam=0.1)
    assert abs(m.theta[1]) < 1e-10


def test_column_scaling_rescales_coefficient():
    X, t, e = _planted(200, [0.7, -0.4], 4)
    m1 = sv.fit_cox(X, t, e, lam=0.0)
    X2 = X.copy()
    X2[:, 0] *= 3.0
    m2 = sv.fit_cox(X2, t, e, lam=0.0)
    assert m2.theta[0] == pytest.approx(m1.theta[0] / 3.0, rel=1e-7)
    assert m2.theta[1] == pytest.approx(m1.theta[1], rel=1e-7)


def test_shift_invariance_of_ranking():
    X, t, e = _planted(150, [0.7, -0.4], 5)
    r1 = sv.fit_cox(X, t, e, 1e-2).predict_risk(X)
    r2 = sv.fit_cox(X + [5.0, -2.0], t, e, 1e-2).predict_risk(X + [5.0, -2.0])
    np.testing.assert_array_equal(np.argsort(r1), np.argsort(r2))


def test_small_lambda_agrees_with_zero():
    X, t, e = _planted(150, [0.7, -0.4, 0.1], 6)
    a = sv.fit_cox(X, t, e, 0.0).predict_risk(X)
    b = sv.fit_cox(X, t, e, 1e-8).predict_risk(X)
    np.testing.assert_array_equal(np.argsort(a), np.argsort(b))


def test_no_events_and_separation():
    with pytest.raises(ValueError):
        sv.fit_cox(np.ones((3, 1)), [1, 2, 3], [0, 0, 0])
    x = np.arange(1.0, 11.0)[:, None]
    with pytest.raises(sv.CoxDivergenceError, match="lambda"):
        sv.fit_cox(-x, x[:, 0], np.ones(10), lam=0.0)


def test_predict_risk_arithmetic():
    m = sv.CoxModel(theta=np.array([2.0, -1.0]), lam=0.0)
    assert m.predict_risk([1.0, 1.0]) == 1.0
    assert m.predict_risk([0.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        m.predict_risk([1.0])


def test_breslow_jump():
    times, H0 = sv.breslow_baseline(np.zeros(1), np.zeros((4, 1)), [2, 3, 4, 5], [1, 0, 0, 0])
    np.testing.assert_array_equal(times, [2.0])
    assert H0[0] == 0.25
    assert sv.breslow_baseline(np.zeros(1), np.zeros((3, 1)), [1, 2, 3], [0, 0, 0])[1].size == 0


def test_survival_curve_properties(tmp_path):
    X, t, e = _planted(120, [0.6, -0.3], 7)
    m = sv.fit_cox(X, t, e, 1e-3, standardize=True)
    assert np.all(np.diff(m.base_H0) > 0)
    grid = np.linspace(0, 60, 50)
    S = m.survival_curve(X[:5], grid)
    assert np.all(S[:, 0] == 1.0)
    assert np.all(np.diff(S, axis=1) <= 0)
    x = X[:1]
    shifted = x + np.log(2) * m.scale / m.theta * np.array([1.0, 0.0]) / 1.0
    S1, S2 = m.survival_curve(x, grid[10:]), m.survival_curve(shifted, grid[10:])
    np.testing.assert_allclose(np.log(S2), 2 * np.log(S1), rtol=1e-12)
    m.save(tmp_path / "cox.json")
    m2 = sv.CoxModel.load(tmp_path / "cox.json")
    np.testing.assert_array_equal(m2.predict_risk(X), m.predict_risk(X))
    assert set(m.to_dict()) >= {"theta", "lambda", "feature_names", "normalization", "baseline"}


def test_lasso_filter_keeps_signal():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(300, 6))
    t, e = sg.sample_survival(X, np.array([1.0, 0, 0, -0.8, 0, 0]), 0.1, (5.0, 40.0), rng)
    keep = sv.lasso_select(X, t, e, alpha=15.0)
    assert {0, 3} <= set(keep.tolist()) and len(keep) < 6


def test_select_lambda_returns_grid_value():
    X, t, e = _planted(200, [0.8, -0.5], 10)
    lam, c = sv.select_lambda(X[:120], t[:120], e[:120], X[120:], t[120:], e[120:])
    assert lam in (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0) and 0.5 < c <= 1.0
