"""Interpretation: attention rollout heatmaps, segment/phase KDE summaries,
permutation-sampling SHAP and prompt-restricted secondary survival analysis."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .synthgen import GROUPS, PHASES, SEGMENT_ANGLES, SEGMENTS, write_blob

RISK_LEVELS = ("low", "moderate", "high")
KDE_POINTS = 256


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

def attention_rollout(attn_layers, check: bool = True) -> np.ndarray:
    """Product of residual-corrected, head-averaged attention matrices.

    ``attn_layers``: sequence of [N+1, N+1] or [heads, N+1, N+1] arrays, first
    layer first. Returns the rollout matrix R with R = A_L ... A_1.
    """
    R = None
    for l, A in enumerate(attn_layers):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim == 3:
            A = A.mean(axis=0)
        rows = A.sum(axis=-1)
        if check and np.any(np.abs(rows - 1.0) > 1e-4):
            raise ValueError(f"attention rows of layer {l} are not normalised (max dev {np.abs(rows - 1).max():.2e})")
        Ah = 0.5 * A + 0.5 * np.eye(A.shape[-1])
        Ah /= Ah.sum(axis=-1, keepdims=True)
        R = Ah if R is None else Ah @ R
    if R is None:
        raise ValueError("no attention layers given")
    return R


def token_relevance(attn_layers) -> np.ndarray:
    """Summary-token row of the rollout restricted to the patch tokens."""
    return attention_rollout(attn_layers)[0, 1:]


def cross_attention_relevance(A, mask=None) -> np.ndarray:
    """Stage-II cross-attention [heads, L, N] -> per-image-token weight (sums to 1)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 2:
        A = A[None]
    m = np.ones(A.shape[1]) if mask is None else np.asarray(mask, dtype=np.float64)
    w = (A.mean(axis=0) * m[:, None]).sum(axis=0) / m.sum()
    return w


def composed_relevance(cross, rollout) -> np.ndarray:
    """Push cross-attention over output tokens back to input patches through the
    encoder rollout (summary row/column dropped, rows renormalised)."""
    R = np.asarray(rollout, dtype=np.float64)[1:, 1:]
    R = R / R.sum(axis=1, keepdims=True)
    return np.asarray(cross, dtype=np.float64) @ R


def relevance_to_frames(rel, prov, patch, shape, upsample: int = 1) -> np.ndarray:
    """Scatter token relevance onto its tubelet and average over slices -> [T, H, W]."""
    D, T, H, W = shape
    pd, pt, ph, pw = patch
    vol = np.zeros((D, T, H, W))
    for r, (d, t, y, x) in zip(rel, prov):
        vol[d:d + pd, t:t + pt, y:y + ph, x:x + pw] = r
    frames = vol.mean(axis=0)
    if upsample > 1:
        frames = np.repeat(np.repeat(frames, upsample, axis=1), upsample, axis=2)
    return frames


def normalize_heatmap(frames) -> np.ndarray:
    """Per-study min-max to [0, 1]; a constant map becomes all zeros."""
    f = np.asarray(frames, dtype=np.float64)
    span = f.max() - f.min()
    return np.zeros_like(f) if span <= 0 else (f - f.min()) / span


# ---------------------------------------------------------------------------
# segments, phases, risk levels
# ---------------------------------------------------------------------------

def _sector_labels(shape, center) -> np.ndarray:
    """Six 60-degree sectors inside the largest disc around ``center`` that fits
    the image; pixels outside it get -1 so every sector has the same footprint."""
    H, W = shape
    cy, cx = center
    if not (0 <= cy <= H - 1 and 0 <= cx <= W - 1):
        raise ValueError(f"LV centre {center} lies outside the {H}x{W} image")
    yy, xx = np.mgrid[0:H, 0:W]
    radius = min(cy, cx, H - 1 - cy, W - 1 - cx) + 0.5
    # counter-clockwise from image-right, image-up is 90 degrees
    ang = np.degrees(np.arctan2(-(yy - cy), xx - cx)) % 360.0
    lab = np.full(shape, -1)
    for k, s in enumerate(SEGMENTS):
        diff = (ang - SEGMENT_ANGLES[s] + 180.0) % 360.0 - 180.0
        lab[(diff >= -30.0) & (diff < 30.0)] = k
    lab[np.hypot(yy - cy, xx - cx) > radius] = -1
    return lab


def segment_partition(heatmap, center) -> dict:
    """Mean heatmap value in each 60-degree sector around ``center``."""
    h = np.asarray(heatmap, dtype=np.float64)
    lab = _sector_labels(h.shape, center)
    return {s: float(h[lab == k].mean()) if np.any(lab == k) else 0.0 for k, s in enumerate(SEGMENTS)}


def segment_shares(masses: dict) -> dict:
    tot = sum(masses.values())
    return {k: (v / tot if tot > 0 else 0.0) for k, v in masses.items()}


def phase_assign(frame: int, study) -> str:
    labels = getattr(study, "phase_labels", None)
    if not labels:
        raise ValueError("study carries no phase labels")
    if not 0 <= frame < len(labels):
        raise IndexError(f"frame {frame} outside 0..{len(labels) - 1}")
    return labels[frame]


def risk_levels(risks) -> list:
    """Tertiles of predicted risk -> low / moderate / high."""
    r = np.asarray(risks, dtype=np.float64)
    q1, q2 = np.quantile(r, [1 / 3, 2 / 3])
    return [RISK_LEVELS[0] if v <= q1 else RISK_LEVELS[1] if v <= q2 else RISK_LEVELS[2] for v in r]


# ---------------------------------------------------------------------------
# KDE
# ---------------------------------------------------------------------------

def silverman_bandwidth(values, n_grid: int = KDE_POINTS) -> float:
    v = np.asarray(values, dtype=np.float64)
    sd = v.std(ddof=1) if v.size > 1 else 0.0
    iqr = np.subtract(*np.percentile(v, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    h = 0.9 * spread * v.size ** (-0.2)
    # keep the kernel resolvable on the grid so the trapezoid sum stays exact
    return max(h, 1.5 / (n_grid - 1))


def kde_estimate(values, bandwidth: float | None = None, n_grid: int = KDE_POINTS):
    """Gaussian KDE on [0, 1] with reflection at both ends -> (grid, density)."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("KDE needs at least two values")
    if np.any((v < 0) | (v > 1)):
        raise ValueError("KDE values must lie in [0, 1]")
    h = silverman_bandwidth(v, n_grid) if bandwidth is None else float(bandwidth)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    grid = np.linspace(0.0, 1.0, n_grid)
    return grid, kernels.kde_reflect(grid, v, h)


def segment_phase_kde(heatmaps, centers, phase_labels, levels, n_grid: int = KDE_POINTS) -> dict:
    """{(segment, phase, level): (grid, density) or None} from per-frame segment masses."""
    buckets: dict = {}
    for frames, c, labels, lev in zip(heatmaps, centers, phase_labels, levels):
        for t, fr in enumerate(frames):
            for s, m in segment_partition(fr, c).items():
                buckets.setdefault((s, labels[t], lev), []).append(m)
    out = {}
    for s in SEGMENTS:
        for ph in PHASES:
            for lev in RISK_LEVELS:
                vals = buckets.get((s, ph, lev), [])
                out[(s, ph, lev)] = kde_estimate(vals, n_grid=n_grid) if len(vals) >= 2 else None
    return out


def segment_mass_table(heatmaps, centers, levels) -> dict:
    """{(segment, level): mean segment mass over subjects and frames}."""
    acc: dict = {}
    for frames, c, lev in zip(heatmaps, centers, levels):
        per = [segment_partition(fr, c) for fr in frames]
        for s in SEGMENTS:
            acc.setdefault((s, lev), []).append(np.mean([p[s] for p in per]))
    return {k: float(np.mean(v)) for k, v in acc.items()}


# ---------------------------------------------------------------------------
# SHAP
# ---------------------------------------------------------------------------

@dataclass
class ShapResult:
    phi: np.ndarray
    se: np.ndarray
    fx: float
    f_background: float


def shap_sampling(model, x, background, n_samples: int = 200, seed: int = 0) -> ShapResult:
    """Permutation-sampling Shapley values.

    Each sample draws a feature order and a background row, walks from the
    background row to ``x`` one feature at a time and credits each feature
    with its marginal change. Attributions sum to f(x) - mean_b f(b) exactly
    per sample.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    x = np.asarray(x, dtype=np.float64)
    bg = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if bg.shape[0] == 0:
        raise ValueError("background set is empty")
    p = x.size
    rng = np.random.default_rng(seed)
    perms = np.argsort(rng.random((n_samples, p)), axis=1)
    rows = rng.integers(0, bg.shape[0], n_samples)
    # chain[s, k] = background row with the first k permuted features taken from x
    chain = np.repeat(bg[rows][:, None, :], p + 1, axis=1)
    for k in range(p):
        cols = perms[:, k]
        chain[np.arange(n_samples)[:, None], np.arange(k + 1, p + 1)[None, :], cols[:, None]] = x[cols][:, None]
    f = np.asarray(model(chain.reshape(-1, p)), dtype=np.float64).reshape(n_samples, p + 1)
    marg = np.diff(f, axis=1)
    contrib = np.zeros((n_samples, p))
    contrib[np.arange(n_samples)[:, None], perms] = marg
    phi = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / np.sqrt(n_samples) if n_samples > 1 else np.zeros(p)
    fx = float(np.asarray(model(x[None])).ravel()[0])
    return ShapResult(phi, se, fx, float(np.mean(model(bg))))


@dataclass
class ShapReport:
    mean_abs: dict
    group_share: dict
    aggregated_img: float
    top_img_dims: list
    top10: list = field(default_factory=list)


def aggregate_attributions(phi, feature_names, feature_group: dict, image_prefix="img_", top_img=5) -> ShapReport:
    """phi: [subjects, features]. Image dimensions are named with ``image_prefix``."""
    A = np.abs(np.atleast_2d(np.asarray(phi, dtype=np.float64))).mean(axis=0)
    names = list(feature_names)
    mean_abs = dict(zip(names, map(float, A)))
    img = [n for n in names if n.startswith(image_prefix)]
    ehr = [n for n in names if not n.startswith(image_prefix)]
    top_dims = sorted(img, key=lambda n: -mean_abs[n])[:top_img]
    agg = float(sum(mean_abs[n] for n in top_dims))
    per_group = {g: sum(mean_abs[n] for n in ehr if feature_group.get(n) == g) for g in GROUPS}
    tot = sum(per_group.values())
    share = {g: (100.0 * v / tot if tot > 0 else 0.0) for g, v in per_group.items()}
    cand = [(n, mean_abs[n]) for n in ehr] + [("Aggregated_Img_feature", agg)]
    top10 = [(n, v) for n, v in sorted(cand, key=lambda kv: (-kv[1], kv[0])) if v > 0][:10]
    return ShapReport(mean_abs, share, agg, top_dims, top10)


# ---------------------------------------------------------------------------
# writers
# ---------------------------------------------------------------------------

def write_heatmap(path, frames, phase, risk_level, **extra):
    sidecar = {"phase": phase, "risk_level": risk_level}
    sidecar.update(extra)
    write_blob(path, np.asarray(frames, dtype=np.float32), sidecar)


def write_kde_csv(path, kde: dict):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment", "phase", "risk_level", "x", "density"])
        for (s, ph, lev), val in kde.items():
            if val is None:
                continue
            grid, dens = val
            for x, d in zip(grid, dens):
                w.writerow([s, ph, lev, f"{x:.6f}", f"{d:.8g}"])


def write_shap_csv(path, subject_ids, feature_names, phi):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "feature", "shap"])
        for sid, row in zip(subject_ids, np.atleast_2d(phi)):
            for n, v in zip(feature_names, row):
                w.writerow([sid, n, f"{v:.10g}"])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
