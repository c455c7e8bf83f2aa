"""Synthetic beating-heart cine phantoms, grouped EHR tables and survival outcomes.

Everything is a pure function of (spec, seed) so downstream tests can compare
against the generating ground truth.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import ndimage, optimize

SEGMENTS = ("A", "AS", "IS", "I", "IL", "AL")
# counter-clockwise from image-right, image-up is 90 degrees
SEGMENT_ANGLES = {"A": 90.0, "AS": 150.0, "IS": 210.0, "I": 270.0, "IL": 330.0, "AL": 30.0}
PHASES = ("early diastole", "late diastole", "ventricular ejection", "isovolumetric relaxation")
LAX_VIEWS = ("2ch", "3ch", "4ch")
# in-plane direction of each long-axis cut; the opposite wall sits at +180
LAX_PLANE_ANGLES = {"2ch": 90.0, "3ch": 330.0, "4ch": 30.0}

GROUPS = ("clinical", "physiological", "biochemical", "pharmaceutical")
GROUP_PREFIX = {"clinical": "clin_", "physiological": "phys_", "biochemical": "bio_", "pharmaceutical": "pharm_"}

# name -> (kind, a, b): binary uses a = prevalence; continuous uses mean a, sd b
_FEATURE_TABLE = {
    "clinical": [
        ("age", "cont", 60.0, 10.0), ("male", "bin", 0.7, 0), ("bmi", "cont", 25.0, 3.5),
        ("hypertension", "bin", 0.5, 0), ("diabetes", "bin", 0.25, 0), ("smoking", "bin", 0.35, 0),
        ("dyslipidemia", "bin", 0.4, 0), ("family_history", "bin", 0.15, 0), ("prior_mi", "bin", 0.12, 0),
        ("prior_pci", "bin", 0.15, 0), ("atrial_fibrillation", "bin", 0.08, 0), ("ckd", "bin", 0.1, 0),
        ("killip_gt1", "bin", 0.15, 0),
    ],
    "physiological": [
        ("hr", "cont", 72.0, 12.0), ("sbp", "cont", 128.0, 16.0), ("dbp", "cont", 78.0, 10.0),
        ("ef", "latent", 0.5, 0.12), ("sv", "latent", 75.0, 20.0), ("edv", "latent", 150.0, 35.0),
        ("esv", "latent", 75.0, 30.0), ("lv_mass", "cont", 120.0, 25.0),
    ],
    "biochemical": [
        ("troponin_t", "logn", math.log(0.5), 1.0), ("nt_probnp", "logn", math.log(600.0), 0.9),
        ("ck_mb", "logn", math.log(20.0), 0.8), ("creatinine", "cont", 85.0, 20.0), ("ldl", "cont", 2.9, 0.8),
        ("hdl", "cont", 1.1, 0.25), ("triglycerides", "cont", 1.7, 0.6), ("glucose", "cont", 6.2, 1.5),
        ("hba1c", "cont", 6.1, 0.9), ("crp", "logn", math.log(5.0), 0.9),
    ],
    "pharmaceutical": [
        ("aspirin", "bin", 0.8, 0), ("p2y12_inhibitor", "bin", 0.6, 0), ("statin", "bin", 0.8, 0),
        ("beta_blocker", "bin", 0.6, 0), ("acei_arb", "bin", 0.55, 0), ("mra", "bin", 0.2, 0),
        ("diuretic", "bin", 0.25, 0), ("nitrates", "bin", 0.3, 0), ("anticoagulant", "bin", 0.1, 0),
        ("insulin", "bin", 0.1, 0),
    ],
}

FEATURE_NAMES: list[str] = [GROUP_PREFIX[g] + f[0] for g in GROUPS for f in _FEATURE_TABLE[g]]
FEATURE_GROUP: dict[str, str] = {GROUP_PREFIX[g] + f[0]: g for g in GROUPS for f in _FEATURE_TABLE[g]}
FEATURE_KIND: dict[str, str] = {GROUP_PREFIX[g] + f[0]: f[1] for g in GROUPS for f in _FEATURE_TABLE[g]}
BINARY_FEATURES = [n for n in FEATURE_NAMES if FEATURE_KIND[n] == "bin"]
GROUP_SIZES = tuple(len(_FEATURE_TABLE[g]) for g in GROUPS)


def group_indices() -> dict[str, np.ndarray]:
    return {g: np.array([i for i, n in enumerate(FEATURE_NAMES) if FEATURE_GROUP[n] == g]) for g in GROUPS}


def is_binary_mask() -> np.ndarray:
    return np.array([FEATURE_KIND[n] == "bin" for n in FEATURE_NAMES])


# ---------------------------------------------------------------------------
# phantom
# ---------------------------------------------------------------------------

@dataclass
class PhantomSpec:
    D: int = 24
    T: int = 24
    H: int = 96
    W: int = 96
    ef: float = 0.55
    edv: float = 150.0
    defect: str = "none"
    noise: float = 0.0
    center_offset: tuple[float, float] = (0.0, 0.0)
    lv_radius: float = 14.0
    wall: float = 6.0
    hypokinesis: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.ef < 1.0:
            raise ValueError(f"EF must lie in (0, 1), got {self.ef}")
        if self.edv <= 0:
            raise ValueError("EDV must be positive")
        if self.defect != "none" and self.defect not in SEGMENTS:
            raise ValueError(f"unknown defect segment {self.defect!r}")
        if self.T < 4 or self.D < 1:
            raise ValueError("need T >= 4 frames and D >= 1 slices")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def esv(self) -> float:
        return self.edv * (1.0 - self.ef)

    @property
    def center(self) -> tuple[float, float]:
        return (self.H / 2.0 + self.center_offset[0], self.W / 2.0 + self.center_offset[1])


@dataclass
class CineStudy:
    sax: np.ndarray                   # [D, T, H, W]
    lax: dict[str, np.ndarray]        # view -> [T, H, W]
    phase_labels: list[str]
    subject_id: str = "subject"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.lax) != set(LAX_VIEWS):
            raise ValueError(f"expected exactly the LAX views {LAX_VIEWS}")
        if len(self.phase_labels) != self.sax.shape[1]:
            raise ValueError("one phase label per frame required")


def _phase_spans(T: int) -> tuple[int, int, int]:
    n_eject = max(1, int(round(0.35 * T)))
    n_ivr = max(1, int(round(0.1 * T)))
    n_fill = T - n_eject - n_ivr
    if n_fill < 2:
        raise ValueError("too few frames for four cardiac phases")
    return n_eject, n_ivr, n_fill


def volume_curve(spec: PhantomSpec) -> np.ndarray:
    """Cavity volume per frame: ejection, plateau at ESV, two-step filling back to EDV."""
    n_e, n_i, n_f = _phase_spans(spec.T)
    span = spec.edv - spec.esv
    v = np.empty(spec.T)
    t = np.arange(n_e)
    v[:n_e] = spec.esv + span * (1.0 + np.cos(np.pi * t / n_e)) / 2.0
    v[n_e:n_e + n_i] = spec.esv
    s = (np.arange(n_f) + 1.0) / n_f
    v[n_e + n_i:] = spec.esv + span * (1.0 - np.cos(np.pi * s)) / 2.0
    return v


def phase_labels(T: int) -> list[str]:
    n_e, n_i, n_f = _phase_spans(T)
    early = (n_f + 1) // 2
    return (["ventricular ejection"] * n_e + ["isovolumetric relaxation"] * n_i
            + ["early diastole"] * early + ["late diastole"] * (n_f - early))


def _angle_map(H, W, center):
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    dy = -(rows - center[0])
    dx = cols - center[1]
    return np.hypot(dy, dx), np.degrees(np.arctan2(dy, dx)) % 360.0


def _in_sector(theta_deg, segment):
    if segment == "none":
        return np.zeros_like(theta_deg, dtype=bool)
    d = (theta_deg - SEGMENT_ANGLES[segment] + 180.0) % 360.0 - 180.0
    return np.abs(d) <= 30.0


def _radii(spec: PhantomSpec):
    """End-diastolic radius and per-frame cavity radius (area scales as V^(2/3))."""
    r_ed = spec.lv_radius * (spec.edv / 150.0) ** (1.0 / 3.0)
    r_t = r_ed * (volume_curve(spec) / spec.edv) ** (1.0 / 3.0)
    r_def = r_ed - (1.0 - spec.hypokinesis) * (r_ed - r_t)
    return r_ed, r_t, r_def


def _slice_scale(D):
    z = (np.arange(D) + 0.5) / D
    return np.sqrt(1.0 - (0.85 * z) ** 2), z


def _cover(radius, r):
    # one-pixel linear edge; vanishes continuously as the radius shrinks to 0
    return np.clip(np.minimum(radius - r + 0.5, 2.0 * radius), 0.0, 1.0)


def _background(rng, H, W):
    tex = ndimage.gaussian_filter(rng.standard_normal((H, W)), 3.0)
    tex /= tex.std() + 1e-12
    return 0.15 + 0.06 * tex


def _lv_radius_maps(spec, theta):
    r_ed, r_t, r_def = _radii(spec)
    sector = _in_sector(theta, spec.defect)
    r_cav = np.where(sector[None], r_def[:, None, None], r_t[:, None, None])
    m = (r_ed + spec.wall) ** 2 - r_ed ** 2
    r_epi = np.sqrt(r_cav ** 2 + m)
    return r_ed, r_cav, r_epi


def cavity_masks(spec: PhantomSpec) -> np.ndarray:
    """Hard LV cavity masks [D, T, H, W] before anti-aliasing and noise."""
    r, theta = _angle_map(spec.H, spec.W, spec.center)
    _, r_cav, _ = _lv_radius_maps(spec, theta)
    scale, _ = _slice_scale(spec.D)
    return np.stack([r[None] < s * r_cav for s in scale])


def generate_phantom(spec: PhantomSpec, seed: int = 0, subject_id: str = "subject") -> CineStudy:
    rng = np.random.default_rng(seed)
    H, W, T = spec.H, spec.W, spec.T
    cy, cx = spec.center
    bg = _background(rng, H, W)
    r, theta = _angle_map(H, W, (cy, cx))
    r_ed, r_cav, r_epi = _lv_radius_maps(spec, theta)
    vol = volume_curve(spec)
    rv_scale = (vol / spec.edv) ** (1.0 / 6.0)

    scale, z = _slice_scale(spec.D)
    sax = np.empty((spec.D, T, H, W), dtype=np.float32)
    for d, s in enumerate(scale):
        cav = _cover(s * r_cav, r[None])
        epi = _cover(s * r_epi, r[None])
        img = bg[None] * (1.0 - epi) + 0.25 * (epi - cav) + 0.85 * cav
        if z[d] < 0.75:
            rv_c = (cy, cx - s * (r_ed + spec.wall) - 0.35 * s * r_ed)
            r_rv, _ = _angle_map(H, W, rv_c)
            rv_rad = 1.15 * s * r_ed * rv_scale[:, None, None]
            outside = 1.0 - _cover(s * r_epi + 2.0, r[None])
            rv = _cover(rv_rad, r_rv[None]) * outside
            img = img * (1.0 - rv) + 0.75 * rv
        sax[d] = img

    lax = {}
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    u = cols - cx
    r_ed_, r_t, r_def = _radii(spec)
    m = (r_ed_ + spec.wall) ** 2 - r_ed_ ** 2
    length_ed = 2.6 * r_ed_
    base_row = cy - length_ed / 2.0
    for view in LAX_VIEWS:
        phi = LAX_PLANE_ANGLES[view]
        side_theta = np.where(u >= 0, phi, (phi + 180.0) % 360.0)
        sector = _in_sector(side_theta, spec.defect)
        img = np.empty((T, H, W))
        for t in range(T):
            shorten = 1.0 - 0.15 * (spec.edv - vol[t]) / spec.edv
            length = length_ed * shorten
            zf = (rows - base_row) / length
            prof = np.sqrt(np.clip(1.0 - zf ** 2, 0.0, None)) * (zf >= 0)
            zf_epi = (rows - base_row) / (length + spec.wall)
            prof_epi = np.sqrt(np.clip(1.0 - zf_epi ** 2, 0.0, None)) * (zf_epi >= 0)
            rc = np.where(sector, r_def[t], r_t[t])
            re = np.sqrt(rc ** 2 + m)
            cav = _cover(prof * rc, np.abs(u))
            epi = _cover(prof_epi * re, np.abs(u))
            frame = bg * (1.0 - epi) + 0.25 * (epi - cav) + 0.85 * cav
            if view == "4ch":
                rv_u = -(r_ed_ + spec.wall + 0.35 * r_ed_)
                rv_len = 0.8 * length
                zr = (rows - base_row) / rv_len
                prof_rv = np.sqrt(np.clip(1.0 - zr ** 2, 0.0, None)) * (zr >= 0)
                rv = _cover(prof_rv * 1.0 * r_ed_ * rv_scale[t], np.abs(u - rv_u)) * (1.0 - epi)
                frame = frame * (1.0 - rv) + 0.75 * rv
            img[t] = frame
        lax[view] = img.astype(np.float32)

    if spec.noise > 0:
        sax += (spec.noise * rng.standard_normal(sax.shape)).astype(np.float32)
        for view in LAX_VIEWS:
            lax[view] += (spec.noise * rng.standard_normal(lax[view].shape)).astype(np.float32)
    np.clip(sax, 0.0, 1.0, out=sax)
    for view in LAX_VIEWS:
        np.clip(lax[view], 0.0, 1.0, out=lax[view])
    meta = {"ef": spec.ef, "edv": spec.edv, "esv": spec.esv, "defect": spec.defect,
            "center": [float(cy), float(cx)]}
    return CineStudy(sax=sax, lax=lax, phase_labels=phase_labels(T), subject_id=subject_id, meta=meta)


# ---------------------------------------------------------------------------
# EHR
# ---------------------------------------------------------------------------

@dataclass
class EHRNoise:
    ef_sd: float = 0.0
    volume_sd: float = 0.0


def _latent_scores(latents: dict) -> dict[str, float]:
    """Image latents on a roughly unit scale, used by EHR proxies."""
    return {"ef": (latents["ef"] - 0.5) / 0.12,
            "defect": 1.0 if latents.get("defect", "none") != "none" else -1.0}


def generate_ehr(latents: dict, rng: np.random.Generator, noise: EHRNoise | None = None,
                 prevalences: dict[str, float] | None = None,
                 proxies: dict[str, dict[str, float]] | None = None) -> dict[str, float]:
    """One EHR row. Physiological volumes/EF derive from the phantom latents.

    ``proxies`` maps a feature to loadings on the latent scores ("ef", "defect"):
    continuous draws mix the loaded score with independent noise, binary ones
    shift the log-odds. Draw order does not depend on ``proxies``.
    """
    noise = noise or EHRNoise()
    prevalences = prevalences or {}
    proxies = proxies or {}
    ef, edv = latents["ef"], latents["edv"]
    score = _latent_scores(latents)
    row: dict[str, float] = {}
    for g in GROUPS:
        for name, kind, a, b in _FEATURE_TABLE[g]:
            full = GROUP_PREFIX[g] + name
            load = proxies.get(full, {})
            shift = sum(w * score[k] for k, w in load.items())
            if kind == "bin":
                p = prevalences.get(full, a)
                if load:
                    p = 1.0 / (1.0 + math.exp(-(math.log(p / (1.0 - p)) + 2.0 * shift)))
                row[full] = float(rng.random() < p)
            elif kind in ("cont", "logn"):
                z = rng.standard_normal()
                if load:
                    z = shift + math.sqrt(max(0.0, 1.0 - sum(w * w for w in load.values()))) * z
                row[full] = float(a + b * z) if kind == "cont" else float(math.exp(a + b * z))
    e_ef, e_edv, e_sv, e_esv = rng.standard_normal(4)
    row["phys_ef"] = float(ef + noise.ef_sd * e_ef)
    row["phys_edv"] = float(edv * (1.0 + noise.volume_sd * e_edv))
    row["phys_sv"] = float(ef * edv * (1.0 + noise.volume_sd * e_sv))
    row["phys_esv"] = float(edv * (1.0 - ef) * (1.0 + noise.volume_sd * e_esv))
    return {n: row[n] for n in FEATURE_NAMES}


# ---------------------------------------------------------------------------
# survival
# ---------------------------------------------------------------------------

MIN_TIME = 1e-3


def sample_survival(x: np.ndarray, theta: np.ndarray, baseline: float, censor: tuple[float, float],
                    rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Exponential proportional-hazards event times with uniform censoring."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    x = np.asarray(x, dtype=np.float64)
    eta = x @ theta if x.size else np.zeros(len(x))
    u = rng.random(len(eta))
    event_t = -np.log(u) / (baseline * np.exp(eta))
    lo, hi = censor
    cens_t = lo + (hi - lo) * rng.random(len(eta))
    t = np.minimum(event_t, cens_t)
    delta = (event_t <= cens_t).astype(np.int64)
    return np.maximum(t, MIN_TIME), delta


def expected_event_fraction(eta: np.ndarray, baseline: float, censor: tuple[float, float]) -> float:
    lo, hi = censor
    lam = baseline * np.exp(eta)
    if hi - lo < 1e-12:
        surv = np.exp(-lam * lo)
    else:
        surv = (np.exp(-lam * lo) - np.exp(-lam * hi)) / (lam * (hi - lo))
    return float(np.mean(1.0 - surv))


def calibrate_baseline(eta: np.ndarray, censor: tuple[float, float], target: float) -> float:
    """Baseline rate whose expected event fraction under ``censor`` equals ``target``."""
    if not 0.0 < target < 1.0:
        raise ValueError("target event fraction must be in (0, 1)")
    f = lambda lg: expected_event_fraction(eta, math.exp(lg), censor) - target
    return math.exp(optimize.brentq(f, -30.0, 15.0, xtol=1e-12))


# ---------------------------------------------------------------------------
# cohorts
# ---------------------------------------------------------------------------

def default_theta() -> dict[str, float]:
    return {"img_ef": -1.0, "img_defect": 1.0}


def default_defect_probs() -> dict[str, float]:
    probs = {"none": 0.5}
    probs.update({s: 0.5 / len(SEGMENTS) for s in SEGMENTS})
    return probs


@dataclass
class CohortSpec:
    n: int = 64
    seed: int = 0
    cohort_id: str = "synth"
    grid: tuple[int, int, int, int] = (24, 24, 96, 96)
    theta_star: dict[str, float] = field(default_factory=default_theta)
    baseline_rate: float | None = None
    target_event_fraction: float = 0.4
    censor_window: tuple[float, float] = (6.0, 60.0)
    image_noise: float = 0.02
    ef_range: tuple[float, float] = (0.25, 0.70)
    defect_probs: dict[str, float] = field(default_factory=default_defect_probs)
    ehr_noise: EHRNoise = field(default_factory=EHRNoise)
    prevalences: dict[str, float] = field(default_factory=dict)
    ehr_proxies: dict[str, dict[str, float]] = field(default_factory=dict)
    max_offset: float = 0.0

    def __post_init__(self):
        if self.n < 8:
            raise ValueError("a cohort needs at least 8 subjects")
        if isinstance(self.ehr_noise, dict):
            self.ehr_noise = EHRNoise(**self.ehr_noise)
        self.grid = tuple(int(g) for g in self.grid)
        self.censor_window = tuple(float(c) for c in self.censor_window)
        lo, hi = self.censor_window
        if lo < 0 or hi < lo:
            raise ValueError("censor window must satisfy 0 <= lo <= hi")
        total = sum(self.defect_probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError("defect probabilities must sum to 1")
        for name, load in self.ehr_proxies.items():
            if name not in FEATURE_KIND or FEATURE_KIND[name] == "latent":
                raise ValueError(f"{name!r} cannot be an EHR proxy")
            if set(load) - {"ef", "defect"}:
                raise ValueError(f"proxy loadings for {name!r} must use 'ef' or 'defect'")
            if FEATURE_KIND[name] != "bin" and sum(w * w for w in load.values()) > 1.0:
                raise ValueError(f"squared proxy loadings for {name!r} exceed 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"] = list(self.grid)
        d["censor_window"] = list(self.censor_window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        d = dict(d)
        if "ehr_noise" in d and isinstance(d["ehr_noise"], dict):
            d["ehr_noise"] = EHRNoise(**d["ehr_noise"])
        return cls(**d)


IMAGE_COVARIATES = ["img_ef", "img_edv", "img_defect"] + [f"img_defect_{s}" for s in SEGMENTS]

# generative population moments used to standardise EHR covariates in the hazard
_POP_MOMENTS = {GROUP_PREFIX[g] + f[0]: (f[2], f[3]) for g in GROUPS for f in _FEATURE_TABLE[g]}


def hazard_covariates(latents: list[dict], ehr: np.ndarray) -> tuple[np.ndarray, list[str]]:
    """Design matrix for the generating hazard: EHR (standardised) plus image latents."""
    cols = []
    for j, name in enumerate(FEATURE_NAMES):
        v = ehr[:, j].astype(np.float64)
        kind = FEATURE_KIND[name]
        a, b = _POP_MOMENTS[name]
        if kind == "cont" or kind == "latent":
            v = (v - a) / b
        elif kind == "logn":
            v = (np.log(np.maximum(v, 1e-12)) - a) / b
        cols.append(v)
    ef = np.array([lt["ef"] for lt in latents])
    edv = np.array([lt["edv"] for lt in latents])
    defect = [lt["defect"] for lt in latents]
    cols.append((ef - 0.5) / 0.1)
    cols.append((edv - 150.0) / 35.0)
    cols.append(np.array([d != "none" for d in defect], dtype=np.float64))
    for s in SEGMENTS:
        cols.append(np.array([d == s for d in defect], dtype=np.float64))
    return np.column_stack(cols), FEATURE_NAMES + IMAGE_COVARIATES


def subject_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(index)])


def _subject_latents(spec: CohortSpec, rng: np.random.Generator) -> dict:
    ef = float(rng.uniform(*spec.ef_range))
    edv = float(150.0 * math.exp(0.15 * rng.standard_normal()) * (1.0 + 0.8 * (0.55 - ef)))
    names = list(spec.defect_probs)
    probs = np.array([spec.defect_probs[k] for k in names])
    defect = names[int(rng.choice(len(names), p=probs))]
    off = spec.max_offset
    offset = (float(rng.uniform(-off, off)), float(rng.uniform(-off, off))) if off > 0 else (0.0, 0.0)
    return {"ef": ef, "edv": edv, "esv": edv * (1.0 - ef), "defect": defect, "center_offset": offset}


def phantom_spec_for(spec: CohortSpec, latents: dict) -> PhantomSpec:
    D, T, H, W = spec.grid
    return PhantomSpec(D=D, T=T, H=H, W=W, ef=latents["ef"], edv=latents["edv"], defect=latents["defect"],
                       noise=spec.image_noise, center_offset=tuple(latents["center_offset"]))


@dataclass
class Cohort:
    spec: CohortSpec
    subject_ids: list[str]
    ehr: np.ndarray              # [n, 41] raw (pre-normalisation)
    time: np.ndarray
    event: np.ndarray
    latents: list[dict]
    baseline_rate: float
    norm_stats: dict[str, list[float]]
    studies: list[CineStudy] | None = None

    @property
    def n(self) -> int:
        return len(self.subject_ids)

    def normalized_ehr(self) -> np.ndarray:
        return normalize_ehr(self.ehr, self.norm_stats)

    def study(self, i: int) -> CineStudy:
        if self.studies is None:
            raise RuntimeError("cohort was loaded without images")
        return self.studies[i]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.ehr, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.time, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.event, dtype="<i8").tobytes())
        for st in self.studies or []:
            h.update(np.ascontiguousarray(st.sax, dtype="<f4").tobytes())
            for v in LAX_VIEWS:
                h.update(np.ascontiguousarray(st.lax[v], dtype="<f4").tobytes())
        return h.hexdigest()


def ehr_norm_stats(ehr: np.ndarray) -> dict[str, list[float]]:
    binary = is_binary_mask()
    vals = np.asarray(ehr, dtype=np.float64)
    mean = np.where(binary, 0.0, vals.mean(axis=0))
    sd = np.where(binary, 1.0, vals.std(axis=0))
    sd = np.where(sd < 1e-12, 1.0, sd)
    return {"mean": mean.tolist(), "sd": sd.tolist()}


def normalize_ehr(ehr: np.ndarray, stats: dict) -> np.ndarray:
    return (np.asarray(ehr, dtype=np.float64) - np.asarray(stats["mean"])) / np.asarray(stats["sd"])


def iter_subjects(spec: CohortSpec) -> Iterator[tuple[int, dict, np.random.Generator]]:
    for i in range(spec.n):
        rng = np.random.default_rng(subject_seed(spec.seed, i))
        yield i, _subject_latents(spec, rng), rng


def generate_cohort(spec: CohortSpec, out_dir: str | os.PathLike | None = None,
                    with_images: bool = True) -> Cohort:
    """Build a cohort; optionally persist it under ``out_dir``."""
    ids, latents, rows, studies = [], [], [], []
    for i, lat, rng in iter_subjects(spec):
        sid = f"{spec.cohort_id}-{i:04d}"
        ids.append(sid)
        latents.append(lat)
        rows.append([generate_ehr(lat, rng, spec.ehr_noise, spec.prevalences, spec.ehr_proxies)[n] for n in FEATURE_NAMES])
        if with_images:
            ps = phantom_spec_for(spec, lat)
            img_seed = int(rng.integers(2 ** 31))
            studies.append(generate_phantom(ps, seed=img_seed, subject_id=sid))
    ehr = np.array(rows)
    X, names = hazard_covariates(latents, ehr)
    theta = np.array([spec.theta_star.get(n, 0.0) for n in names])
    unknown = set(spec.theta_star) - set(names)
    if unknown:
        raise ValueError(f"unknown covariates in theta_star: {sorted(unknown)}")
    eta = X @ theta
    baseline = spec.baseline_rate
    if baseline is None:
        baseline = calibrate_baseline(eta, spec.censor_window, spec.target_event_fraction)
    surv_rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x5EED]))
    time, event = sample_survival(X, theta, baseline, spec.censor_window, surv_rng)
    cohort = Cohort(spec=spec, subject_ids=ids, ehr=ehr, time=time, event=event, latents=latents,
                    baseline_rate=float(baseline), norm_stats=ehr_norm_stats(ehr),
                    studies=studies if with_images else None)
    if out_dir is not None:
        write_cohort(cohort, out_dir)
    return cohort


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

def write_blob(path: str | os.PathLike, array: np.ndarray, sidecar: dict) -> None:
    path = Path(path)
    arr = np.ascontiguousarray(array, dtype="<f4")
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(arr.tobytes())
    os.replace(tmp, path)
    meta = dict(sidecar)
    meta.update(shape=list(arr.shape), dtype="f32le")
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


def read_blob(path: str | os.PathLike) -> tuple[np.ndarray, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta.get("dtype") != "f32le":
        raise ValueError(f"{path}: unsupported dtype {meta.get('dtype')}")
    arr = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["shape"]).copy()
    return arr, meta


def write_study(study: CineStudy, subject_dir: str | os.PathLike) -> None:
    d = Path(subject_dir)
    d.mkdir(parents=True, exist_ok=True)
    base = {"subject_id": study.subject_id, "phase_labels": study.phase_labels}
    write_blob(d / "sax.f32", study.sax, dict(base, view="sax", meta=study.meta))
    for v in LAX_VIEWS:
        write_blob(d / f"lax_{v}.f32", study.lax[v], dict(base, view=v))


def read_study(subject_dir: str | os.PathLike) -> CineStudy:
    d = Path(subject_dir)
    sax, meta = read_blob(d / "sax.f32")
    lax = {v: read_blob(d / f"lax_{v}.f32")[0] for v in LAX_VIEWS}
    return CineStudy(sax=sax, lax=lax, phase_labels=list(meta["phase_labels"]), subject_id=meta["subject_id"],
                     meta=meta.get("meta", {}))


def write_ehr_csv(path, subject_ids, ehr, time, event) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id"] + FEATURE_NAMES + ["time_months", "event"])
        for sid, row, t, e in zip(subject_ids, ehr, time, event):
            w.writerow([sid] + [repr(float(v)) for v in row] + [repr(float(t)), int(e)])


def read_ehr_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[1:-2] != FEATURE_NAMES:
            raise ValueError(f"{path}: unexpected EHR columns")
        ids, rows, times, events = [], [], [], []
        for line in r:
            ids.append(line[0])
            rows.append([float(v) for v in line[1:-2]])
            times.append(float(line[-2]))
            events.append(int(line[-1]))
    return ids, np.array(rows), np.array(times), np.array(events, dtype=np.int64)


def write_cohort(cohort: Cohort, out_dir: str | os.PathLike) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_ehr_csv(out / "ehr.csv", cohort.subject_ids, cohort.ehr, cohort.time, cohort.event)
    truth = {
        "theta_star": cohort.spec.theta_star,
        "baseline_rate": cohort.baseline_rate,
        "latents": {sid: lt for sid, lt in zip(cohort.subject_ids, cohort.latents)},
    }
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
    meta = {"spec": cohort.spec.to_dict(), "norm_stats": cohort.norm_stats, "subject_ids": cohort.subject_ids,
            "feature_names": FEATURE_NAMES, "baseline_rate": cohort.baseline_rate}
    (out / "cohort.json").write_text(json.dumps(meta, indent=1))
    if cohort.studies is not None:
        for st in cohort.studies:
            write_study(st, out / "subjects" / st.subject_id)


def load_cohort(path: str | os.PathLike, with_images: bool = True) -> Cohort:
    path = Path(path)
    meta = json.loads((path / "cohort.json").read_text())
    truth = json.loads((path / "truth.json").read_text())
    ids, ehr, time, event = read_ehr_csv(path / "ehr.csv")
    studies = None
    if with_images:
        studies = [read_study(path / "subjects" / sid) for sid in ids]
    return Cohort(spec=CohortSpec.from_dict(meta["spec"]), subject_ids=ids, ehr=ehr, time=time, event=event,
                  latents=[truth["latents"][s] for s in ids], baseline_rate=float(truth["baseline_rate"]),
                  norm_stats=meta["norm_stats"], studies=studies)


def directory_digest(path: str | os.PathLike) -> str:
    """sha256 over every file under ``path`` (sorted relative paths + bytes)."""
    h = hashlib.sha256()
    root = Path(path)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
