"""Cox proportional-hazards head on fused EHR + image features.

Partial likelihood uses Breslow ties; fitting is damped Newton-Raphson on the
ridge-penalised negative log partial likelihood.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import kernels

log = logging.getLogger(__name__)


class CoxDivergenceError(RuntimeError):
    pass


def fuse_features(e, r=None) -> np.ndarray:
    """EHR dims first, then image dims. Works on single rows or batches."""
    e = np.asarray(e, dtype=np.float64)
    parts = [e] if r is None or np.size(r) == 0 else [e, np.asarray(r, dtype=np.float64)]
    out = np.concatenate(parts, axis=-1)
    if not np.isfinite(out).all():
        raise ValueError("fused features contain NaN/inf")
    return out


def risk_sets(time, event):
    """Descending-time order and, for each sorted position, the last index of its tie group."""
    t = np.asarray(time, dtype=np.float64)
    if np.any(t <= 0):
        raise ValueError("survival times must be positive")
    order = np.argsort(-t, kind="stable")
    ts = t[order]
    grp_end = np.empty(len(ts), dtype=np.int64)
    # last position whose time equals ts[i]: everything before it is >= ts[i]
    grp_end[:] = np.searchsorted(-ts, -ts, side="right") - 1
    return order, grp_end, np.asarray(event)[order].astype(np.int64)


def cox_nll_grad_hess(theta, X, time, event, lam=0.0):
    """Penalised negative log partial likelihood with gradient and Hessian."""
    X = np.asarray(X, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    order, grp_end, ev = risk_sets(time, event)
    Xs = np.ascontiguousarray(X[order])
    eta = Xs @ theta
    nll, grad, hess = kernels.cox_derivs(eta, Xs, ev, grp_end)
    nll += lam * theta @ theta
    grad = grad + 2.0 * lam * theta
    hess = hess + 2.0 * lam * np.eye(len(theta))
    return float(nll), grad, hess


def cox_nll(theta, X, time, event, lam=0.0) -> float:
    return cox_nll_grad_hess(theta, X, time, event, lam)[0]


def cox_nll_tensor(theta: dc.Tensor, X, time, event, lam=0.0) -> dc.Tensor:
    """Same objective on the autodiff tape (used for gradient checks)."""
    order, grp_end, ev = risk_sets(time, event)
    Xs = dc.Tensor(np.asarray(X, dtype=np.float64)[order], dtype=np.float64)
    eta = (Xs @ theta.reshape(-1, 1)).reshape(-1)
    lse = dc.take(dc.logcumsumexp(eta), grp_end, axis=0)
    mask = dc.Tensor(ev.astype(np.float64), dtype=np.float64)
    loss = ((lse - eta) * mask).sum()
    if lam:
        loss = loss + (theta * theta).sum() * lam
    return loss


@dataclass
class CoxModel:
    theta: np.ndarray
    lam: float
    feature_names: list = field(default_factory=list)
    mean: np.ndarray | None = None     # standardisation applied before theta
    scale: np.ndarray | None = None
    base_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    base_H0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_iter: int = 0
    converged: bool = True

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != len(self.theta):
            raise ValueError(f"expected {len(self.theta)} features, got {X.shape[-1]}")
        if self.mean is not None:
            X = (X - self.mean) / self.scale
        return X

    def predict_risk(self, X) -> np.ndarray:
        return self.transform(X) @ self.theta

    def cumulative_hazard(self, t) -> np.ndarray:
        idx = np.searchsorted(self.base_times, np.asarray(t, dtype=float), side="right") - 1
        H = np.concatenate([[0.0], self.base_H0])
        return H[idx + 1]

    def survival_curve(self, X, t_grid) -> np.ndarray:
        """S(t | x) = exp(-H0(t) exp(theta'x)); rows follow X, columns t_grid."""
        eta = np.atleast_1d(self.predict_risk(np.atleast_2d(X)))
        H0 = self.cumulative_hazard(t_grid)
        return np.exp(-np.outer(np.exp(eta), H0))

    def to_dict(self) -> dict:
        return {
            "theta": [float(v) for v in self.theta],
            "lambda": float(self.lam),
            "feature_names": list(self.feature_names),
            "normalization": None if self.mean is None else {
                "mean": [float(v) for v in self.mean], "scale": [float(v) for v in self.scale]},
            "baseline": {"times": [float(v) for v in self.base_times], "H0": [float(v) for v in self.base_H0]},
            "n_iter": int(self.n_iter),
            "converged": bool(self.converged),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d) -> "CoxModel":
        norm = d.get("normalization")
        return cls(
            theta=np.array(d["theta"], dtype=float), lam=d["lambda"], feature_names=d["feature_names"],
            mean=None if norm is None else np.array(norm["mean"]),
            scale=None if norm is None else np.array(norm["scale"]),
            base_times=np.array(d["baseline"]["times"]), base_H0=np.array(d["baseline"]["H0"]),
            n_iter=d.get("n_iter", 0), converged=d.get("converged", True),
        )

    @classmethod
    def load(cls, path) -> "CoxModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def breslow_baseline(theta, X, time, event):
    """Jump times and cumulative baseline hazard at each distinct event time."""
    t = np.asarray(time, dtype=np.float64)
    e = np.asarray(event).astype(bool)
    w = np.exp(np.asarray(X, dtype=np.float64) @ theta)
    times = np.unique(t[e])
    if times.size == 0:
        return np.zeros(0), np.zeros(0)
    jumps = np.array([e[t == u].sum() / w[t >= u].sum() for u in times])
    return times, np.cumsum(jumps)


def fit_cox(X, time, event, lam: float = 1e-4, standardize: bool = False, feature_names=None,
            max_iter: int = 100, tol: float = 1e-8, theta0=None) -> CoxModel:
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(time, dtype=np.float64)
    e = np.asarray(event).astype(np.int64)
    n, p = X.shape
    if n < 2:
        raise ValueError("need at least two subjects")
    if e.sum() == 0:
        raise ValueError("cannot fit a Cox model without events")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    mean = scale = None
    if standardize:
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
        X = (X - mean) / scale

    theta = np.zeros(p) if theta0 is None else np.array(theta0, dtype=float)
    f, g, H = cox_nll_grad_hess(theta, X, t, e, lam)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol:
            converged = True
            it -= 1
            break
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, g, rcond=None)[0]
        s = 1.0
        while True:
            cand = theta - s * step
            fc, gc, Hc = cox_nll_grad_hess(cand, X, t, e, lam)
            if np.isfinite(fc) and fc <= f + 1e-12 * abs(f):
                break
            s *= 0.5
            if s < 1e-10:
                break
        if s < 1e-10:
            # no descent along the Newton direction; we are at numerical optimum
            converged = np.max(np.abs(g)) < 1e-5 * max(1.0, abs(f))
            break
        theta, f, g, H = cand, fc, gc, Hc
        if np.max(np.abs(theta)) > 1e3 or not np.isfinite(theta).all():
            raise CoxDivergenceError("Cox fit diverging (likely separation); increase the ridge lambda")
    else:
        converged = np.max(np.abs(g)) < tol
    # a log hazard ratio above 15 per standard deviation only arises when the
    # likelihood has no finite maximum (monotone separation)
    if np.max(np.abs(theta) * X.std(axis=0)) > 15:
        raise CoxDivergenceError("Cox fit ran off toward infinity (separation); increase the ridge lambda")
    if not converged:
        if np.max(np.abs(theta)) > 30:
            raise CoxDivergenceError("Cox fit did not converge and coefficients are large; increase lambda")
        log.warning("Cox fit stopped after %d iterations (|grad|=%.3g)", it, np.max(np.abs(g)))
    times, H0 = breslow_baseline(theta, X, t, e)
    return CoxModel(theta=theta, lam=lam, feature_names=list(feature_names or [f"x{i}" for i in range(p)]),
                    mean=mean, scale=scale, base_times=times, base_H0=H0, n_iter=it, converged=bool(converged))


def lasso_select(X, time, event, alpha: float, max_iter: int = 200, tol: float = 1e-7) -> np.ndarray:
    """Indices of features kept by an L1-penalised Cox fit (coordinate descent on
    the local quadratic model, re-expanded each outer iteration). X should be
    standardised."""
    X = np.asarray(X, dtype=np.float64)
    p = X.shape[1]
    theta = np.zeros(p)
    f_prev = np.inf
    for _ in range(max_iter):
        f, g, H = cox_nll_grad_hess(theta, X, time, event, 0.0)
        obj = f + alpha * np.abs(theta).sum()
        if abs(f_prev - obj) < tol * max(1.0, abs(obj)):
            break
        f_prev = obj
        new = theta.copy()
        # minimise g'(b - theta) + 0.5 (b - theta)' H (b - theta) + alpha |b|_1
        for _ in range(50):
            old = new.copy()
            for j in range(p):
                if H[j, j] <= 0:
                    continue
                r = g[j] + H[j] @ (new - theta) - H[j, j] * (new[j] - theta[j])
                z = H[j, j] * theta[j] - r
                new[j] = np.sign(z) * max(abs(z) - alpha, 0.0) / H[j, j]
            if np.max(np.abs(new - old)) < 1e-10:
                break
        # damped acceptance keeps the outer loop monotone
        s = 1.0
        while s > 1e-6:
            cand = theta + s * (new - theta)
            if cox_nll(cand, X, time, event) + alpha * np.abs(cand).sum() <= obj:
                break
            s *= 0.5
        theta = cand
    return np.flatnonzero(np.abs(theta) > 1e-10)


def select_lambda(X_tr, t_tr, e_tr, X_va, t_va, e_va, grid=(1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0),
                  standardize=True):
    """Grid search on validation C-index; ties go to the larger lambda."""
    from .evalmetrics import c_index

    best = None
    for lam in sorted(grid):
        try:
            m = fit_cox(X_tr, t_tr, e_tr, lam, standardize=standardize)
            c = c_index(m.predict_risk(X_va), t_va, e_va)
        except (CoxDivergenceError, ValueError):
            continue
        if best is None or c >= best[1]:
            best = (lam, c)
    if best is None:
        raise CoxDivergenceError("no lambda in the grid produced a usable fit")
    return best
