"""Survival evaluation: concordance, time-dependent AUC, Kaplan-Meier, log-rank,
Fisher p-value pooling and the normalised risk-time regression."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import kernels


def _outcomes(time, event):
    t = np.asarray(time, dtype=np.float64)
    e = np.asarray(event).astype(np.int64)
    if t.shape != e.shape or t.ndim != 1:
        raise ValueError("time and event must be 1-D arrays of equal length")
    return t, e


def c_index(risks, time, event) -> float:
    """Harrell's C; tied risks count one half."""
    t, e = _outcomes(time, event)
    r = np.asarray(risks, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError("one risk per subject required")
    num, den = kernels.concordance(t, e, r)
    if den == 0:
        raise ValueError("no comparable pairs")
    return num / den


@dataclass
class KMCurve:
    time: np.ndarray        # 0 followed by distinct observed times
    survival: np.ndarray
    at_risk: np.ndarray     # number at risk just before each time
    events: np.ndarray
    group: str = "all"

    def at(self, t) -> np.ndarray:
        """Right-continuous step value S(t)."""
        idx = np.searchsorted(self.time, np.asarray(t, dtype=float), side="right") - 1
        return self.survival[np.clip(idx, 0, None)]

    def before(self, t) -> np.ndarray:
        """Left limit S(t-)."""
        idx = np.searchsorted(self.time, np.asarray(t, dtype=float), side="left") - 1
        return self.survival[np.clip(idx, 0, None)]


def km_estimate(time, event, group: str = "all") -> KMCurve:
    """Product-limit estimate. At tied times events are taken before censorings,
    so a subject censored at t still counts as at risk for events at t."""
    t, e = _outcomes(time, event)
    if t.size == 0:
        raise ValueError("empty sample")
    uniq = np.unique(t)
    n_at = np.array([(t >= u).sum() for u in uniq])
    d = np.array([e[t == u].sum() for u in uniq])
    s = np.cumprod((n_at - d) / n_at)
    return KMCurve(
        time=np.concatenate([[0.0], uniq]),
        survival=np.concatenate([[1.0], s]),
        at_risk=np.concatenate([[t.size], n_at]),
        events=np.concatenate([[0], d]),
        group=group,
    )


def td_auc(risks, time, event, horizon: float) -> float:
    """Cumulative/dynamic AUC at ``horizon`` with IPCW from the KM estimate of
    the censoring distribution. Cases: t <= horizon with an event; controls:
    t > horizon. Tied risks count one half."""
    t, e = _outcomes(time, event)
    r = np.asarray(risks, dtype=np.float64)
    cases = (t <= horizon) & (e == 1)
    controls = t > horizon
    if not cases.any() or not controls.any():
        raise ValueError(f"td_auc: no cases or no controls at horizon {horizon}")
    cens = km_estimate(t, 1 - e, group="censoring")
    g = cens.before(t[cases])
    if np.any(g <= 0):
        raise ValueError(f"td_auc: censoring survival reaches 0 before horizon {horizon}")
    w = 1.0 / g
    rc, rn = r[cases][:, None], r[controls][None, :]
    conc = (rc > rn) + 0.5 * (rc == rn)
    # control weights 1/G(horizon) are constant and cancel
    return float((w[:, None] * conc).sum() / (w.sum() * controls.sum()))


def stratify_median(risks):
    """Indices of the high (> median) and low (<= median) risk groups."""
    r = np.asarray(risks, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two subjects")
    if np.ptp(r) == 0:
        raise ValueError("degenerate stratification: all risks identical")
    med = np.median(r)
    high = np.flatnonzero(r > med)
    low = np.flatnonzero(r <= med)
    return high, low


def logrank_test(time_a, event_a, time_b, event_b) -> tuple[float, float]:
    ta, ea = _outcomes(time_a, event_a)
    tb, eb = _outcomes(time_b, event_b)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both groups must be non-empty")
    t = np.concatenate([ta, tb])
    e = np.concatenate([ea, eb])
    in_a = np.concatenate([np.ones(ta.size, bool), np.zeros(tb.size, bool)])
    # accumulate O - E for both groups so swapping labels is bit-for-bit symmetric
    oe_a, oe_b, var = 0.0, 0.0, 0.0
    for u in np.unique(t[e == 1]):
        at_risk = t >= u
        n = at_risk.sum()
        na = (at_risk & in_a).sum()
        nb = n - na
        died = (t == u) & (e == 1)
        d = died.sum()
        da = (died & in_a).sum()
        oe_a += da - d * na / n
        oe_b += (d - da) - d * nb / n
        if n > 1:
            var += d * (na * nb) / (n * n) * (n - d) / (n - 1)
    obs_minus_exp = 0.5 * (oe_a - oe_b)
    if var <= 0:
        raise ValueError("log-rank variance is zero (no informative events)")
    stat = obs_minus_exp ** 2 / var
    return float(stat), float(stats.chi2.sf(stat, 1))


def fisher_combine(pvalues) -> tuple[float, int, float]:
    p = np.asarray(pvalues, dtype=np.float64)
    if p.size == 0 or np.any(p <= 0) or np.any(p > 1):
        raise ValueError("p-values must lie in (0, 1]")
    x2 = float(-2.0 * np.log(p).sum())
    df = 2 * p.size
    return x2, df, float(stats.chi2.sf(x2, df))


@dataclass
class Regression:
    slope: float
    intercept: float
    ci: list            # 95% CI of the slope
    x: np.ndarray
    y: np.ndarray
    band_lo: np.ndarray  # pointwise 95% band of the fitted mean at each x
    band_hi: np.ndarray
    event: np.ndarray


def _minmax(v):
    span = np.ptp(v)
    if span == 0:
        raise ValueError("zero variance")
    return (v - v.min()) / span


def risk_time_regression(risks, time, event) -> Regression:
    t, e = _outcomes(time, event)
    r = np.asarray(risks, dtype=np.float64)
    if r.size < 3:
        raise ValueError("need at least three subjects")
    if np.ptp(r) == 0:
        raise ValueError("zero variance in inverse risk")
    x = _minmax(-r)
    y = _minmax(t)
    n = x.size
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    slope = float(((x - xm) * (y - ym)).sum() / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    dof = n - 2
    if dof > 0:
        s2 = (resid ** 2).sum() / dof
        q = stats.t.ppf(0.975, dof)
    else:
        s2, q = 0.0, 0.0
    se_slope = math.sqrt(s2 / sxx)
    se_fit = np.sqrt(s2 * (1.0 / n + (x - xm) ** 2 / sxx))
    fit = intercept + slope * x
    return Regression(slope, intercept, [slope - q * se_slope, slope + q * se_slope],
                      x, y, fit - q * se_fit, fit + q * se_fit, e.copy())


@dataclass
class MetricsReport:
    seed: int
    cohort: str
    setting: str
    c_index: float
    td_auc: dict = field(default_factory=dict)
    logrank_p: float | None = None
    fisher: dict | None = None
    regression: dict | None = None

    def to_dict(self):
        return {
            "seed": int(self.seed), "cohort": self.cohort, "setting": self.setting,
            "c_index": _r(self.c_index),
            "td_auc": {k: _r(v) for k, v in self.td_auc.items()},
            "logrank_p": _r(self.logrank_p),
            "fisher": self.fisher,
            "regression": self.regression,
        }

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def _r(v):
    return None if v is None else float(round(float(v), 12))


def default_horizons(time, event):
    """Median follow-up of the cohort (observed times)."""
    return [float(np.median(np.asarray(time, dtype=float)))]


def evaluate(risks, time, event, seed=0, cohort="cohort", setting="internal", horizons=None) -> MetricsReport:
    """All headline metrics on one test set. Metrics that are undefined for the
    sample (e.g. no controls at a horizon) are stored as None."""
    t, e = _outcomes(time, event)
    r = np.asarray(risks, dtype=np.float64)
    horizons = horizons if horizons is not None else default_horizons(t, e)
    aucs = {}
    for h in horizons:
        try:
            aucs[f"{float(h):g}"] = td_auc(r, t, e, h)
        except ValueError:
            aucs[f"{float(h):g}"] = None
    p = None
    try:
        hi, lo = stratify_median(r)
        _, p = logrank_test(t[hi], e[hi], t[lo], e[lo])
    except ValueError:
        pass
    reg = None
    try:
        fit = risk_time_regression(r, t, e)
        reg = {"slope": _r(fit.slope), "ci": [_r(c) for c in fit.ci]}
    except ValueError:
        pass
    return MetricsReport(seed=seed, cohort=cohort, setting=setting, c_index=c_index(r, t, e),
                         td_auc=aucs, logrank_p=p, regression=reg)


def write_km_csv(path, curves: list[KMCurve]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "survival", "at_risk", "group"])
        for c in curves:
            for t, s, n in zip(c.time, c.survival, c.at_risk):
                w.writerow([f"{t:.6g}", f"{s:.8g}", int(n), c.group])


def km_by_risk(risks, time, event) -> list[KMCurve]:
    t, e = _outcomes(time, event)
    hi, lo = stratify_median(risks)
    return [km_estimate(t[hi], e[hi], "high"), km_estimate(t[lo], e[lo], "low")]
