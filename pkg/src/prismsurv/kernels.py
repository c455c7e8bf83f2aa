"""Hot loops, each in a numba and a numpy flavour.

The public names at the bottom dispatch through ``_jit.pick``; the ``*_nb`` and
``*_np`` variants stay importable so tests can check parity and the benchmark
can time both.
"""

import numpy as np

from ._jit import njit, pick

# --------------------------------------------------------------------------
# Farneback displacement update
#
# R1, R2: [H, W, 5] polynomial coefficients (b_y, b_x, a_yy, a_xx, a_xy) of the
# two frames. flow: [H, W, 2] current (dy, dx). Output M: [H, W, 5] holding
# G11, G12, G22, h1, h2 where G = A^T A and h = A^T db.
# --------------------------------------------------------------------------


@njit
def farneback_update_nb(R1, R2, flow):
    H, W = R1.shape[0], R1.shape[1]
    M = np.empty((H, W, 5))
    r2 = np.empty(5)
    for y in range(H):
        for x in range(W):
            dy = flow[y, x, 0]
            dx = flow[y, x, 1]
            sy = min(max(y + dy, 0.0), H - 1.0)
            sx = min(max(x + dx, 0.0), W - 1.0)
            y0 = int(np.floor(sy))
            x0 = int(np.floor(sx))
            y1 = min(y0 + 1, H - 1)
            x1 = min(x0 + 1, W - 1)
            wy = sy - y0
            wx = sx - x0
            for c in range(5):
                top = R2[y0, x0, c] * (1.0 - wx) + R2[y0, x1, c] * wx
                bot = R2[y1, x0, c] * (1.0 - wx) + R2[y1, x1, c] * wx
                r2[c] = top * (1.0 - wy) + bot * wy
            a11 = 0.5 * (R1[y, x, 2] + r2[2])
            a22 = 0.5 * (R1[y, x, 3] + r2[3])
            a12 = 0.25 * (R1[y, x, 4] + r2[4])
            by = -0.5 * (r2[0] - R1[y, x, 0]) + a11 * dy + a12 * dx
            bx = -0.5 * (r2[1] - R1[y, x, 1]) + a12 * dy + a22 * dx
            M[y, x, 0] = a11 * a11 + a12 * a12
            M[y, x, 1] = a12 * (a11 + a22)
            M[y, x, 2] = a12 * a12 + a22 * a22
            M[y, x, 3] = a11 * by + a12 * bx
            M[y, x, 4] = a12 * by + a22 * bx
    return M


def farneback_update_np(R1, R2, flow):
    H, W = R1.shape[:2]
    yy, xx = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    dy, dx = flow[..., 0], flow[..., 1]
    sy = np.clip(yy + dy, 0.0, H - 1.0)
    sx = np.clip(xx + dx, 0.0, W - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (sy - y0)[..., None]
    wx = (sx - x0)[..., None]
    top = R2[y0, x0] * (1.0 - wx) + R2[y0, x1] * wx
    bot = R2[y1, x0] * (1.0 - wx) + R2[y1, x1] * wx
    r2 = top * (1.0 - wy) + bot * wy

    a11 = 0.5 * (R1[..., 2] + r2[..., 2])
    a22 = 0.5 * (R1[..., 3] + r2[..., 3])
    a12 = 0.25 * (R1[..., 4] + r2[..., 4])
    by = -0.5 * (r2[..., 0] - R1[..., 0]) + a11 * dy + a12 * dx
    bx = -0.5 * (r2[..., 1] - R1[..., 1]) + a12 * dy + a22 * dx
    return np.stack([
        a11 * a11 + a12 * a12,
        a12 * (a11 + a22),
        a12 * a12 + a22 * a22,
        a11 * by + a12 * bx,
        a12 * by + a22 * bx,
    ], axis=-1)


# --------------------------------------------------------------------------
# Harrell concordance: returns (concordant weight, comparable pairs)
# --------------------------------------------------------------------------


@njit
def concordance_nb(time, event, risk):
    n = time.shape[0]
    num = 0.0
    den = 0.0
    for i in range(n):
        if event[i] == 0:
            continue
        for j in range(n):
            if time[i] < time[j]:
                den += 1.0
                if risk[i] > risk[j]:
                    num += 1.0
                elif risk[i] == risk[j]:
                    num += 0.5
    return num, den


def concordance_np(time, event, risk):
    ev = np.asarray(event) != 0
    ti, ri = time[ev][:, None], risk[ev][:, None]
    comp = ti < time[None, :]
    num = (comp & (ri > risk[None, :])).sum() + 0.5 * (comp & (ri == risk[None, :])).sum()
    return float(num), float(comp.sum())


# --------------------------------------------------------------------------
# Cox partial likelihood with Breslow ties.
#
# Inputs are pre-sorted by descending time; ``grp_end[k]`` is the last index
# of k's tie group so that indices 0..grp_end[k] form the risk set of k.
# Returns (nll without penalty, gradient, Hessian).
# --------------------------------------------------------------------------


@njit
def cox_derivs_nb(eta, X, event, grp_end):
    n, p = X.shape
    m = eta.max()
    s0 = 0.0
    s1 = np.zeros(p)
    s2 = np.zeros((p, p))
    nll = 0.0
    grad = np.zeros(p)
    hess = np.zeros((p, p))
    d = 0
    for i in range(n):
        w = np.exp(eta[i] - m)
        s0 += w
        for a in range(p):
            s1[a] += w * X[i, a]
            for b in range(p):
                s2[a, b] += w * X[i, a] * X[i, b]
        if event[i] != 0:
            d += 1
            nll -= eta[i]
            for a in range(p):
                grad[a] -= X[i, a]
        if grp_end[i] == i and d > 0:
            # every event in the tie group shares this risk set
            nll += d * (np.log(s0) + m)
            for a in range(p):
                mu_a = s1[a] / s0
                grad[a] += d * mu_a
                for b in range(p):
                    hess[a, b] += d * (s2[a, b] / s0 - mu_a * s1[b] / s0)
            d = 0
    return nll, grad, hess


def cox_derivs_np(eta, X, event, grp_end):
    ev = np.asarray(event) != 0
    m = eta.max()
    w = np.exp(eta - m)
    S0 = np.cumsum(w)
    S1 = np.cumsum(w[:, None] * X, axis=0)
    g = grp_end[ev]
    nll = float(np.sum(np.log(S0[g]) + m - eta[ev]))
    mu = S1[g] / S0[g][:, None]
    grad = mu.sum(axis=0) - X[ev].sum(axis=0)
    # sum_k S2[k]/S0[k] over events k, folded into one weighted Gram matrix:
    # subject j enters every risk set whose end index is >= j
    c = np.zeros(len(eta))
    np.add.at(c, g, 1.0 / S0[g])
    wc = w * np.cumsum(c[::-1])[::-1]
    hess = (X * wc[:, None]).T @ X - mu.T @ mu
    return nll, grad, hess


# --------------------------------------------------------------------------
# Gower similarity between all pairs of rows
# --------------------------------------------------------------------------


@njit
def gower_matrix_nb(E, binary, ranges):
    n, f = E.shape
    S = np.empty((n, n))
    for i in range(n):
        S[i, i] = 1.0
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(f):
                if binary[k]:
                    acc += 1.0 if E[i, k] == E[j, k] else 0.0
                elif ranges[k] > 0.0:
                    acc += 1.0 - min(abs(E[i, k] - E[j, k]) / ranges[k], 1.0)
                else:
                    acc += 1.0
            S[i, j] = acc / f
            S[j, i] = S[i, j]
    return S


def gower_matrix_np(E, binary, ranges):
    diff = np.abs(E[:, None, :] - E[None, :, :])
    safe = np.where(ranges > 0, ranges, 1.0)
    cont = np.where(ranges > 0, 1.0 - np.minimum(diff / safe, 1.0), 1.0)
    sim = np.where(binary, (diff == 0).astype(float), cont)
    return sim.mean(axis=2)


# --------------------------------------------------------------------------
# Triplet mining: all (i, j, k), pairwise distinct, with S[i,j] > S[i,k] + delta
# --------------------------------------------------------------------------


@njit
def mine_triplets_nb(S, delta):
    n = S.shape[0]
    count = 0
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            for k in range(n):
                if k != i and k != j and S[i, j] > S[i, k] + delta:
                    count += 1
    out = np.empty((count, 3), dtype=np.int64)
    c = 0
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            for k in range(n):
                if k != i and k != j and S[i, j] > S[i, k] + delta:
                    out[c, 0] = i
                    out[c, 1] = j
                    out[c, 2] = k
                    c += 1
    return out


def mine_triplets_np(S, delta):
    n = S.shape[0]
    ok = S[:, :, None] > S[:, None, :] + delta
    eye = np.eye(n, dtype=bool)
    ok &= ~eye[:, :, None] & ~eye[:, None, :] & ~eye[None, :, :]
    return np.argwhere(ok).astype(np.int64)


# --------------------------------------------------------------------------
# Reflected Gaussian KDE on a grid over [0, 1]
# --------------------------------------------------------------------------


@njit
def kde_reflect_nb(grid, values, h):
    g = grid.shape[0]
    n = values.shape[0]
    out = np.zeros(g)
    norm = 1.0 / (n * h * np.sqrt(2.0 * np.pi))
    for a in range(g):
        acc = 0.0
        for b in range(n):
            v = values[b]
            for c in (v, -v, 2.0 - v):
                z = (grid[a] - c) / h
                acc += np.exp(-0.5 * z * z)
        out[a] = acc * norm
    return out


def kde_reflect_np(grid, values, h):
    centers = np.concatenate([values, -values, 2.0 - values])
    z = (grid[:, None] - centers[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (len(values) * h * np.sqrt(2.0 * np.pi))


farneback_update = pick(farneback_update_nb, farneback_update_np)
concordance = pick(concordance_nb, concordance_np)
cox_derivs = pick(cox_derivs_nb, cox_derivs_np)
gower_matrix = pick(gower_matrix_nb, gower_matrix_np)
mine_triplets = pick(mine_triplets_nb, mine_triplets_np)
kde_reflect = pick(kde_reflect_nb, kde_reflect_np)

KERNELS = {
    "farneback_update": (farneback_update_nb, farneback_update_np),
    "concordance": (concordance_nb, concordance_np),
    "cox_derivs": (cox_derivs_nb, cox_derivs_np),
    "gower_matrix": (gower_matrix_nb, gower_matrix_np),
    "mine_triplets": (mine_triplets_nb, mine_triplets_np),
    "kde_reflect": (kde_reflect_nb, kde_reflect_np),
}
