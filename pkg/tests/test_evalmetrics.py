import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prismsurv import evalmetrics as em


def _chi2_even_sf(x, df):
    """Upper tail of chi-square with even df: exp(-x/2) * sum_{i<df/2} (x/2)^i / i!."""
    h = x / 2.0
    return math.exp(-h) * sum(h ** i / math.factorial(i) for i in range(df // 2))


def _brute_c(r, t, e):
    num = den = 0.0
    for i, j in itertools.permutations(range(len(t)), 2):
        if t[i] < t[j] and e[i]:
            den += 1
            num += 1.0 if r[i] > r[j] else 0.5 if r[i] == r[j] else 0.0
    return num / den


def test_c_index_trivial_cases():
    assert em.c_index([3, 2, 1], [1, 2, 3], [1, 1, 1]) == 1.0
    assert em.c_index([1, 2, 3], [1, 2, 3], [1, 1, 1]) == 0.0


def test_c_index_hand_example():
    assert em.c_index([4, 1, 2, 3], [1, 2, 3, 4], [1, 0, 1, 1]) == 0.75


def test_c_index_no_pairs():
    with pytest.raises(ValueError):
        em.c_index([1, 2], [1, 2], [0, 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_c_index_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = 12
    t = rng.integers(1, 6, n).astype(float)
    e = rng.integers(0, 2, n)
    e[0] = 1
    t[0] = 0.5
    r = rng.integers(0, 4, n).astype(float)
    assert em.c_index(r, t, e) == pytest.approx(_brute_c(r, t, e), abs=1e-15)


def test_c_index_monotone_invariance_and_complement():
    rng = np.random.default_rng(0)
    t = rng.exponential(size=80)
    e = rng.integers(0, 2, 80)
    r = rng.normal(size=80)
    base = em.c_index(r, t, e)
    for k in range(100):
        a, b = rng.uniform(0.1, 3), rng.normal()
        f = [lambda x: a * x + b, lambda x: np.exp(a * x), lambda x: x ** 3 + b, np.arctan][k % 4]
        assert em.c_index(f(r), t, e) == base
    assert em.c_index(r, t, e) + em.c_index(-r, t, e) == pytest.approx(1.0, abs=1e-15)


def test_km_textbook():
    km = em.km_estimate([1, 2, 3], [1, 1, 1])
    np.testing.assert_array_equal(km.survival, [1.0, 2 / 3, 1 / 3, 0.0])
    np.testing.assert_array_equal(km.at_risk, [3, 3, 2, 1])


def test_km_no_events_and_tie_rule():
    assert np.all(em.km_estimate([1, 2, 3], [0, 0, 0]).survival == 1.0)
    # event and censoring both at t=1: the censored subject is still at risk
    km = em.km_estimate([1, 1, 2], [1, 0, 1])
    np.testing.assert_allclose(km.survival, [1.0, 2 / 3, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_km_monotone(seed):
    rng = np.random.default_rng(seed)
    km = em.km_estimate(rng.integers(1, 10, 30), rng.integers(0, 2, 30))
    assert km.survival[0] == 1.0
    assert np.all(np.diff(km.survival) <= 0) and np.all(np.diff(km.at_risk) <= 0)
    assert np.all((km.survival >= 0) & (km.survival <= 1))


def test_td_auc_is_mann_whitney_without_censoring():
    rng = np.random.default_rng(1)
    t = rng.permutation(np.arange(1.0, 41.0))
    r = rng.normal(size=40)
    e = np.ones(40, int)
    for tau in (5.5, 20.0, 39.0):
        cases, ctrl = r[t <= tau], r[t > tau]
        mw = np.mean([(a > b) + 0.5 * (a == b) for a in cases for b in ctrl])
        assert abs(em.td_auc(r, t, e, tau) - mw) < 1e-10


def test_td_auc_perfect_and_random():
    t = np.arange(1.0, 11.0)
    assert em.td_auc(-t, t, np.ones(10), 4.0) == 1.0
    rng = np.random.default_rng(3)
    vals = [em.td_auc(rng.normal(size=2000), rng.exponential(size=2000), np.ones(2000), math.log(2))
            for _ in range(3)]
    assert abs(np.mean(vals) - 0.5) < 0.03


def test_td_auc_censoring_weights_by_hand():
    # censoring at 1.5 gives G(2-) = 3/4 for the case at t=2
    t = np.array([1.0, 1.5, 2.0, 3.0, 4.0])
    e = np.array([1, 0, 1, 1, 0])
    r = np.array([0.9, 0.0, 0.2, 0.5, 0.1])
    # cases: t<=2.5 with event -> subjects 0 (w=1) and 2 (w=4/3); controls: 3, 4
    conc = np.array([[1, 1], [0, 1]], float)
    w = np.array([1.0, 4.0 / 3.0])
    expected = (w[:, None] * conc).sum() / (w.sum() * 2)
    assert em.td_auc(r, t, e, 2.5) == pytest.approx(expected, abs=1e-15)


def test_td_auc_errors_name_horizon():
    with pytest.raises(ValueError, match="0.5"):
        em.td_auc([1, 2], [1, 2], [1, 1], 0.5)


def test_stratify_median():
    hi, lo = em.stratify_median([1, 2, 3, 4])
    assert set(hi) == {2, 3} and set(lo) == {0, 1}
    hi, lo = em.stratify_median([5, 1, 3, 9, 7])
    assert abs(len(hi) - len(lo)) == 1
    h2, l2 = em.stratify_median(np.exp([5, 1, 3, 9, 7]))
    assert set(h2) == set(hi)
    with pytest.raises(ValueError, match="degenerate"):
        em.stratify_median([2, 2, 2])


def test_logrank_identical_and_symmetric():
    t = [1, 2, 3, 4]
    stat, p = em.logrank_test(t, [1, 1, 1, 1], t, [1, 1, 1, 1])
    assert stat == 0.0 and p == 1.0
    rng = np.random.default_rng(0)
    ta, tb = rng.exponential(size=20), rng.exponential(2, size=25)
    ea, eb = rng.integers(0, 2, 20), rng.integers(0, 2, 25)
    assert em.logrank_test(ta, ea, tb, eb) == em.logrank_test(tb, eb, ta, ea)


def test_logrank_separated_groups():
    rng = np.random.default_rng(4)
    ta = rng.exponential(size=50)
    _, p = em.logrank_test(ta, np.ones(50), ta * 10, np.ones(50))
    assert p < 1e-6


def test_logrank_textbook_value():
    # two groups, hand-worked: A={1,3}, B={2,4}, all events
    # t=1: n=4,nA=2,d=1 -> O-E=0.5, V=0.25 ; t=2: n=3,nA=1 -> O-E=-1/3, V=2/9
    # t=3: n=2,nA=1 -> O-E=0.5, V=0.25 ; t=4: n=1 -> O-E=0, V=0
    oe = 0.5 - 1 / 3 + 0.5
    v = 0.25 + 2 / 9 + 0.25
    stat, _ = em.logrank_test([1, 3], [1, 1], [2, 4], [1, 1])
    assert stat == pytest.approx(oe ** 2 / v, rel=1e-12)


def test_logrank_no_events():
    with pytest.raises(ValueError):
        em.logrank_test([1, 2], [0, 0], [3], [0])


def test_fisher_k1_identity_and_ones():
    x2, df, p = em.fisher_combine([0.1])
    assert x2 == pytest.approx(4.6052, abs=1e-4) and df == 2 and abs(p - 0.1) < 1e-10
    assert em.fisher_combine([1, 1, 1]) == (0.0, 6, 1.0)


def test_fisher_five_005():
    x2, df, p = em.fisher_combine([0.05] * 5)
    assert x2 == pytest.approx(-10 * math.log(0.05), rel=1e-12) and df == 10
    assert p == pytest.approx(_chi2_even_sf(x2, 10), rel=1e-9)
    assert abs(p - 8.6e-4) < 2e-5


@settings(max_examples=30)
@given(st.floats(1e-12, 1.0))
def test_fisher_single_p_roundtrip(p):
    assert abs(em.fisher_combine([p])[2] - p) < 1e-10


def test_fisher_rejects_zero():
    with pytest.raises(ValueError):
        em.fisher_combine([0.0, 0.5])


def test_regression_perfect_line_and_closed_form():
    t = np.array([1.0, 2.0, 3.0, 4.0])
    fit = em.risk_time_regression(-t, t, np.ones(4))
    assert fit.slope == pytest.approx(1.0, abs=1e-15)
    rng = np.random.default_rng(2)
    r, t = rng.normal(size=30), rng.exponential(size=30)
    fit = em.risk_time_regression(r, t, rng.integers(0, 2, 30))
    x = (-r - (-r).min()) / np.ptp(r)
    y = (t - t.min()) / np.ptp(t)
    closed = ((x - x.mean()) * (y - y.mean())).sum() / ((x - x.mean()) ** 2).sum()
    assert fit.slope == pytest.approx(closed, rel=1e-12)
    assert fit.ci[0] < fit.slope < fit.ci[1]
    assert np.all(fit.band_lo <= fit.band_hi)
    with pytest.raises(ValueError):
        em.risk_time_regression([1, 1, 1], [1, 2, 3], [1, 1, 1])


def test_evaluate_report_fields(tmp_path):
    rng = np.random.default_rng(8)
    t = rng.exponential(10, 60)
    e = rng.integers(0, 2, 60)
    rep = em.evaluate(-t + rng.normal(size=60), t, e, seed=3, cohort="c0")
    d = rep.to_dict()
    assert set(d) == {"seed", "cohort", "setting", "c_index", "td_auc", "logrank_p", "fisher", "regression"}
    assert 0 <= d["c_index"] <= 1 and 0 < d["logrank_p"] <= 1
    rep.write(tmp_path / "m.json")
    em.write_km_csv(tmp_path / "km.csv", em.km_by_risk(-t, t, e))
    assert (tmp_path / "km.csv").read_text().startswith("time,survival,at_risk,group")
