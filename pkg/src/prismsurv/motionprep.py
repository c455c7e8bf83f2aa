"""Dense optical flow (polynomial expansion) and motion-centred ROI cropping.

Flow convention: ``I_{t+1}(x) = I_t(x - d)``, i.e. content at ``x`` in the
first frame shows up at ``x + d`` in the second. Flow arrays are [H, W, 2]
holding (dy, dx) in pixels.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels
from . import synthgen as sg

log = logging.getLogger(__name__)

ROI = 96


@dataclass(frozen=True)
class FlowParams:
    neighborhood: int = 7       # full width of the polynomial fit window
    sigma: float = 1.5          # Gaussian applicability
    levels: int = 3
    scale: float = 0.5
    iterations: int = 3
    smooth_sigma: float = 1.2   # window for the normal equations
    max_disp: float = 10.0
    reg: float = 0.2            # pull toward the coarser estimate in flat regions

    def __post_init__(self):
        if self.neighborhood < 3 or self.sigma <= 0 or self.smooth_sigma <= 0:
            raise ValueError("flow parameters must be positive (neighborhood >= 3)")
        if self.levels < 1 or self.iterations < 1 or self.max_disp <= 0 or self.reg < 0:
            raise ValueError("levels, iterations and max_disp must be >= 1 / positive")
        if not 0 < self.scale < 1:
            raise ValueError("pyramid scale must lie in (0, 1)")


@dataclass
class FlowResult:
    flow: np.ndarray
    low_texture: bool = False


def _poly_basis(n, sigma):
    r = n // 2
    u = np.arange(-r, r + 1, dtype=float)
    g = np.exp(-u * u / (2 * sigma * sigma))
    # normal matrix of the weighted fit over basis [1, y, x, y^2, x^2, xy]
    yy, xx = np.meshgrid(u, u, indexing="ij")
    B = np.stack([np.ones_like(yy), yy, xx, yy * yy, xx * xx, yy * xx], axis=-1).reshape(-1, 6)
    w = np.outer(g, g).reshape(-1)
    G = (B * w[:, None]).T @ B
    return u, g, np.linalg.inv(G)


def poly_expand(img: np.ndarray, n: int = 7, sigma: float = 1.5) -> np.ndarray:
    """Per-pixel weighted quadratic fit; returns [H, W, 5] = (b_y, b_x, a_yy, a_xx, a_xy)."""
    img = np.asarray(img, dtype=np.float64)
    u, g, Ginv = _poly_basis(n, sigma)
    ks = (g, g * u, g * u * u)

    def corr(f, axis, k):
        return ndimage.correlate1d(f, k, axis=axis, mode="reflect")

    cy = [corr(img, 0, k) for k in ks]
    mom = np.stack([
        corr(cy[0], 1, ks[0]),   # 1
        corr(cy[1], 1, ks[0]),   # y
        corr(cy[0], 1, ks[1]),   # x
        corr(cy[2], 1, ks[0]),   # y^2
        corr(cy[0], 1, ks[2]),   # x^2
        corr(cy[1], 1, ks[1]),   # xy
    ], axis=-1)
    coef = mom @ Ginv.T
    return np.ascontiguousarray(coef[..., 1:])


def _solve(M, prior, reg=0.2, rel_reg=1e-3):
    """Solve (G + mu I) d = h + mu * prior per pixel.

    mu is a small fraction of the local trace of G plus ``reg`` times its image
    mean. Both scale with intensity squared, so the estimate is invariant to
    affine intensity maps. Pulling toward the prior rather than toward zero
    leaves well-textured pixels unbiased after a few iterations while flat,
    noise-dominated pixels stay near the coarser estimate.
    """
    g11, g12, g22, h1, h2 = (M[..., i] for i in range(5))
    tr = g11 + g22
    mu = rel_reg * tr + reg * tr.mean() + 1e-30
    a, b, c = g11 + mu, g12, g22 + mu
    r1 = h1 + mu * prior[..., 0]
    r2 = h2 + mu * prior[..., 1]
    det = a * c - b * b
    out = np.empty_like(prior)
    out[..., 0] = (c * r1 - b * r2) / det
    out[..., 1] = (a * r2 - b * r1) / det
    return out


def _clip_magnitude(flow, max_disp):
    mag = np.hypot(flow[..., 0], flow[..., 1])
    over = mag > max_disp
    if over.any():
        flow[over] *= (max_disp / mag[over])[:, None]
    return flow


def _pyramid(img, levels, scale):
    out = [img]
    for _ in range(1, levels):
        prev = out[-1]
        shape = (max(8, int(round(prev.shape[0] * scale))), max(8, int(round(prev.shape[1] * scale))))
        if shape == prev.shape:
            break
        blurred = ndimage.gaussian_filter(prev, sigma=0.5 / scale, mode="reflect")
        zoom = (shape[0] / prev.shape[0], shape[1] / prev.shape[1])
        out.append(ndimage.zoom(blurred, zoom, order=1, mode="nearest", grid_mode=True))
    return out[::-1]   # coarsest first


def _resize_flow(flow, shape):
    fy, fx = shape[0] / flow.shape[0], shape[1] / flow.shape[1]
    up = np.stack([
        ndimage.zoom(flow[..., 0], (fy, fx), order=1, mode="nearest", grid_mode=True) * fy,
        ndimage.zoom(flow[..., 1], (fy, fx), order=1, mode="nearest", grid_mode=True) * fx,
    ], axis=-1)
    return up


def is_low_texture(img, tol=1e-9):
    img = np.asarray(img, dtype=np.float64)
    return float(np.ptp(img)) <= tol * max(1.0, float(np.abs(img).max()))


def farneback_flow(I_t: np.ndarray, I_t1: np.ndarray, params: FlowParams | None = None) -> FlowResult:
    params = params or FlowParams()
    a = np.asarray(I_t, dtype=np.float64)
    b = np.asarray(I_t1, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"frames must be equal-shape 2-D arrays, got {a.shape} and {b.shape}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("frames contain non-finite intensities")
    zero = np.zeros(a.shape + (2,))
    if is_low_texture(a) or is_low_texture(b):
        return FlowResult(zero, low_texture=True)
    if np.array_equal(a, b):
        return FlowResult(zero)

    pa, pb = _pyramid(a, params.levels, params.scale), _pyramid(b, params.levels, params.scale)
    flow = None
    for la, lb in zip(pa, pb):
        R1 = poly_expand(la, params.neighborhood, params.sigma)
        R2 = poly_expand(lb, params.neighborhood, params.sigma)
        flow = np.zeros(la.shape + (2,)) if flow is None else _resize_flow(flow, la.shape)
        for _ in range(params.iterations):
            M = kernels.farneback_update(R1, R2, np.ascontiguousarray(flow))
            M = ndimage.gaussian_filter(M, sigma=(params.smooth_sigma, params.smooth_sigma, 0), mode="reflect")
            flow = _solve(M, flow, params.reg)
            flow = _clip_magnitude(flow, params.max_disp)
    return FlowResult(flow)


def flow_sequence(frames: np.ndarray, params: FlowParams | None = None) -> np.ndarray:
    """Flows between consecutive frames of a [T, H, W] sequence -> [T-1, H, W, 2]."""
    frames = np.asarray(frames)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise ValueError("need a [T, H, W] sequence with T >= 2")
    return np.stack([farneback_flow(frames[t], frames[t + 1], params).flow for t in range(frames.shape[0] - 1)])


def motion_centroid(flows, floor: str = "median"):
    """Magnitude-weighted centroid of the time-summed flow magnitude.

    Returns ``((cy, cx), flag)`` where flag is "no-motion" when there is
    nothing to weight by. ``floor="median"`` subtracts the median of the
    summed magnitude so a uniform noise floor does not drag the centroid
    toward the image centre.
    """
    flows = np.asarray(flows, dtype=np.float64)
    if flows.ndim == 3:
        flows = flows[None]
    if flows.ndim != 4 or flows.shape[0] < 1:
        raise ValueError("expected flow fields of shape [N, H, W, 2]")
    H, W = flows.shape[1:3]
    centre = ((H - 1) / 2.0, (W - 1) / 2.0)
    mag = np.hypot(flows[..., 0], flows[..., 1]).sum(axis=0)
    if floor == "median":
        mag = np.maximum(mag - np.median(mag), 0.0)
    total = mag.sum()
    if not np.isfinite(total) or total <= 1e-12:
        return centre, "no-motion"
    yy, xx = np.mgrid[0:H, 0:W]
    return (float((mag * yy).sum() / total), float((mag * xx).sum() / total)), None


def crop_window(size: int, centre: float, width: int = ROI) -> tuple[int, int]:
    if size < width:
        raise ValueError(f"input dimension {size} is smaller than the {width}-px ROI")
    lo = int(math.floor(centre + 0.5)) - width // 2
    lo = min(max(lo, 0), size - width)
    return lo, lo + width


def roi_crop(study: sg.CineStudy, centre, lax_centres: dict | None = None, width: int = ROI) -> sg.CineStudy:
    """Crop every slice/frame of the SAX stack with one window, LAX views with theirs."""
    H, W = study.sax.shape[-2:]
    cy, cx = centre
    if not (0 <= cy < H and 0 <= cx < W):
        raise ValueError(f"centre {centre} outside image of size {(H, W)}")
    r0, r1 = crop_window(H, cy, width)
    c0, c1 = crop_window(W, cx, width)
    sax = np.ascontiguousarray(study.sax[..., r0:r1, c0:c1])
    lax = {}
    windows = {"sax": [r0, r1, c0, c1]}
    for view, arr in study.lax.items():
        vy, vx = (lax_centres or {}).get(view, ((arr.shape[-2] - 1) / 2, (arr.shape[-1] - 1) / 2))
        a0, a1 = crop_window(arr.shape[-2], vy, width)
        b0, b1 = crop_window(arr.shape[-1], vx, width)
        lax[view] = np.ascontiguousarray(arr[..., a0:a1, b0:b1])
        windows[view] = [a0, a1, b0, b1]
    meta = dict(study.meta, roi=windows)
    return sg.CineStudy(sax=sax, lax=lax, phase_labels=list(study.phase_labels),
                        subject_id=study.subject_id, meta=meta)


def _slices_for_flow(D, which):
    if which == "all":
        return list(range(D))
    if which == "mid":
        return [D // 2]
    return [int(i) for i in which]


def analyze_study(study: sg.CineStudy, params: FlowParams | None = None, slices="mid"):
    """Flow-based centring for one study.

    Returns (sax centre, {view: centre}, per-frame mean |F| over the used SAX
    slices, flags).
    """
    params = params or FlowParams()
    flags = {}
    sax_flows = []
    for d in _slices_for_flow(study.sax.shape[0], slices):
        sax_flows.append(flow_sequence(study.sax[d], params))
    sax_flows = np.concatenate(sax_flows)
    centre, flag = motion_centroid(sax_flows)
    if flag:
        flags["sax"] = flag
    T1 = study.sax.shape[1] - 1
    mags = np.hypot(sax_flows[..., 0], sax_flows[..., 1]).reshape(-1, T1, *sax_flows.shape[1:3])
    per_frame = mags.mean(axis=(0, 2, 3))
    lax_centres = {}
    for view, arr in study.lax.items():
        c, flag = motion_centroid(flow_sequence(arr, params))
        lax_centres[view] = c
        if flag:
            flags[view] = flag
    return centre, lax_centres, per_frame, flags


def prepare_cohort(in_dir, out_dir, params: FlowParams | None = None, slices="mid", width: int = ROI):
    """Crop every study of a cohort directory around its motion centroid.

    Writes the cropped cohort in the synthgen layout plus ``flow_summary.csv``
    with columns (subject, frame, mean_abs_flow).
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids, ehr, time, event = sg.read_ehr_csv(in_dir / "ehr.csv")
    sg.write_ehr_csv(out_dir / "ehr.csv", ids, ehr, time, event)
    for name in ("truth.json", "cohort.json"):
        if (in_dir / name).exists():
            (out_dir / name).write_bytes((in_dir / name).read_bytes())
    rows = []
    centres = {}
    for sid in ids:
        study = sg.read_study(in_dir / "subjects" / sid)
        centre, lax_c, per_frame, flags = analyze_study(study, params, slices)
        cropped = roi_crop(study, centre, lax_c, width)
        cropped.meta["motion_flags"] = flags
        sg.write_study(cropped, out_dir / "subjects" / sid)
        centres[sid] = {"sax": list(centre), **{v: list(c) for v, c in lax_c.items()}}
        rows.extend((sid, t, float(m)) for t, m in enumerate(per_frame))
        if flags:
            log.warning("subject %s: %s", sid, flags)
    with open(out_dir / "flow_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "frame", "mean_abs_flow"])
        for sid, t, m in rows:
            w.writerow([sid, t, f"{m:.6g}"])
    return centres
