"""Experiment orchestration: config, splits, end-to-end runs, IECV and reports.

Run directories live at ``<out>/runs/<cohort>/<setting>/<seed>/`` and hold the
stage checkpoints, the Cox model, metrics JSON, KM/regression CSVs and a
manifest with the config hash and the subject ids each stage touched.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import distill as di
from . import encoders as en
from . import evalmetrics as em
from . import interpret as ip
from . import motionprep as mp
from . import promptalign as pa
from . import survival as sv
from . import synthgen as sg
from . import textcorpus as tc

log = logging.getLogger(__name__)

NEUTRAL_PROMPT = "estimate the risk of adverse cardiac events"
VARIANTS = ("full", "no_stage2", "ehr_only")


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    cohort: dict = field(default_factory=dict)        # CohortSpec fields for `synth`
    flow: dict = field(default_factory=dict)          # FlowParams fields
    prep: dict = field(default_factory=lambda: {"slices": "mid", "width": 96})
    encoder: dict = field(default_factory=dict)       # EncoderConfig fields
    distill: dict = field(default_factory=dict)       # DistillConfig fields
    align: dict = field(default_factory=dict)         # AlignConfig fields
    survival: dict = field(default_factory=lambda: {
        "lambda_grid": [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0], "lasso_alpha": None, "refit_on_val": True})
    splits: dict = field(default_factory=lambda: {"train": 0.6, "val": 0.2, "test": 0.2})
    horizons: list | None = None
    prompts: dict = field(default_factory=lambda: {"n_per_sample": 50, "seed": 0, "eval_prompt": NEUTRAL_PROMPT})

    def __post_init__(self):
        r = self.splits
        if abs(r["train"] + r["val"] + r["test"] - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def encoder_cfg(self) -> en.EncoderConfig:
        return en.EncoderConfig(**self.encoder)

    def distill_cfg(self) -> di.DistillConfig:
        return di.DistillConfig(**self.distill)

    def align_cfg(self) -> pa.AlignConfig:
        return pa.AlignConfig(**self.align)

    def flow_params(self) -> mp.FlowParams:
        return mp.FlowParams(**self.flow)

    def cohort_spec(self, **override) -> sg.CohortSpec:
        d = dict(self.cohort)
        d.update(override)
        return sg.CohortSpec.from_dict(d)


def load_config(path=None, env=None) -> ExperimentConfig:
    """Read a YAML config; PRISM_SEED in the environment overrides ``seed``."""
    data = {}
    if path is not None:
        data = yaml.safe_load(Path(path).read_text()) or {}
    base = ExperimentConfig()
    for key in ("survival", "splits", "prompts", "prep"):
        if key in data:
            merged = dict(getattr(base, key))
            merged.update(data[key] or {})
            data[key] = merged
    unknown = set(data) - {f.name for f in dataclasses.fields(ExperimentConfig)}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = ExperimentConfig(**data)
    env = os.environ if env is None else env
    if env.get("PRISM_SEED") not in (None, ""):
        cfg.seed = int(env["PRISM_SEED"])
    return cfg


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class CohortData:
    cohort_id: str
    path: Path | None
    ids: list
    ehr: np.ndarray
    time: np.ndarray
    event: np.ndarray
    studies: list | None = None

    @property
    def n(self) -> int:
        return len(self.ids)

    def lv_centres(self) -> list:
        """Phantom LV centre in cropped-ROI coordinates (image centre when unknown)."""
        out = []
        for st in self.studies:
            H, W = st.sax.shape[-2:]
            c = st.meta.get("center")
            roi = st.meta.get("roi", {}).get("sax")
            if c is None:
                out.append(((H - 1) / 2, (W - 1) / 2))
            else:
                off = (roi[0], roi[2]) if roi else (0, 0)
                out.append((float(c[0]) - off[0], float(c[1]) - off[1]))
        return out


def load_prepared(path, with_images: bool = True) -> CohortData:
    path = Path(path)
    ids, ehr, t, e = sg.read_ehr_csv(path / "ehr.csv")
    cid = path.name
    if (path / "cohort.json").exists():
        cid = json.loads((path / "cohort.json").read_text()).get("spec", {}).get("cohort_id", cid)
    studies = [sg.read_study(path / "subjects" / s) for s in ids] if with_images else None
    return CohortData(cid, path, list(ids), np.asarray(ehr, float), np.asarray(t, float),
                      np.asarray(e, int), studies)


def from_memory(cohort: sg.Cohort, studies=None) -> CohortData:
    return CohortData(cohort.spec.cohort_id, None, list(cohort.subject_ids), cohort.ehr, cohort.time,
                      cohort.event, studies if studies is not None else cohort.studies)


def synth_and_prepare(cfg: ExperimentConfig, out_dir, **spec_override) -> Path:
    """Generate a cohort from ``cfg.cohort`` and crop it; returns the prepared dir."""
    spec = cfg.cohort_spec(**spec_override)
    out_dir = Path(out_dir)
    raw = out_dir / "raw" / spec.cohort_id
    prep = out_dir / "prepared" / spec.cohort_id
    if not (prep / "ehr.csv").exists():
        sg.generate_cohort(spec, raw)
        mp.prepare_cohort(raw, prep, cfg.flow_params(), cfg.prep.get("slices", "mid"), cfg.prep.get("width", 96))
    return prep


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass
class CohortSplit:
    cohort_id: str
    seed: int
    train: list
    val: list
    test: list

    def to_dict(self):
        return dataclasses.asdict(self)


def make_splits(ids, event, ratios=(0.6, 0.2, 0.2), seed: int = 0, cohort_id: str = "cohort") -> CohortSplit:
    """Event-stratified shuffle split; the same (ids, seed) always gives the same split."""
    ids = list(ids)
    ev = np.asarray(event).astype(int)
    n = len(ids)
    if isinstance(ratios, dict):
        ratios = (ratios["train"], ratios["val"], ratios["test"])
    r_tr, r_va, r_te = ratios
    n_va, n_te = int(round(n * r_va)), int(round(n * r_te))
    n_tr = n - n_va - n_te
    if min(n_tr, n_va, n_te) < 2:
        raise ValueError(f"cohort of {n} too small for a {ratios} split (each part needs >= 2)")
    pos = np.flatnonzero(ev == 1)
    neg = np.flatnonzero(ev == 0)
    if len(pos) < 3 or len(neg) < 3:
        raise ValueError(f"too few events ({len(pos)}) or censorings ({len(neg)}) to stratify")
    rng = np.random.default_rng([seed, 0x5B1])
    pos, neg = rng.permutation(pos), rng.permutation(neg)
    e_va = max(1, int(round(len(pos) * n_va / n)))
    e_te = max(1, int(round(len(pos) * n_te / n)))
    parts_pos = (pos[e_va + e_te:], pos[:e_va], pos[e_va:e_va + e_te])
    c_va, c_te = n_va - e_va, n_te - e_te
    if c_va < 0 or c_te < 0 or len(neg) < c_va + c_te:
        raise ValueError("cannot stratify events with the requested split sizes")
    parts_neg = (neg[c_va + c_te:], neg[:c_va], neg[c_va:c_va + c_te])
    tr, va, te = (sorted(np.concatenate([p, q]).tolist()) for p, q in zip(parts_pos, parts_neg))
    return CohortSplit(cohort_id, int(seed), [ids[i] for i in tr], [ids[i] for i in va], [ids[i] for i in te])


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

class PipelineError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Pool:
    """Subjects available to one run: training source rows plus the test rows."""
    ids: list
    ehr: np.ndarray
    time: np.ndarray
    event: np.ndarray
    studies: list
    cohort_of: list
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    lv_centres: list
    paths: dict = field(default_factory=dict)     # cohort id -> prepared dir

    @property
    def fit_rows(self):
        return np.concatenate([self.train, self.val])


def build_pool(target: CohortData, target_split: CohortSplit, sources=None) -> Pool:
    """Internal when ``sources`` is None; otherwise [(CohortData, CohortSplit)] of the
    other cohorts, whose train/val rows train the model. The target contributes
    only its test rows in the external case."""
    blocks = []          # (cohort, ids, role)
    if sources is None:
        blocks.append((target, target_split.train, "train"))
        blocks.append((target, target_split.val, "val"))
    else:
        for c, s in sources:
            blocks.append((c, s.train, "train"))
            blocks.append((c, s.val, "val"))
    blocks.append((target, target_split.test, "test"))
    ids, ehr, t, e, studies, coh, cent = [], [], [], [], [], [], []
    roles = {"train": [], "val": [], "test": []}
    paths = {c.cohort_id: str(c.path) for c, _, _ in blocks if c.path is not None}
    for c, sub, role in blocks:
        pos = {s: i for i, s in enumerate(c.ids)}
        centres = c.lv_centres() if c.studies is not None else None
        for s in sub:
            i = pos[s]
            roles[role].append(len(ids))
            ids.append(s)
            ehr.append(c.ehr[i])
            t.append(c.time[i])
            e.append(c.event[i])
            studies.append(c.studies[i] if c.studies is not None else None)
            coh.append(c.cohort_id)
            cent.append(centres[i] if centres else None)
    return Pool(ids, np.array(ehr), np.array(t), np.array(e), studies, coh,
                np.array(roles["train"], int), np.array(roles["val"], int), np.array(roles["test"], int), cent,
                paths)


@dataclass
class RepState:
    """Learned representations for one run (shared by all Stage-III variants)."""
    pool: Pool
    e: np.ndarray                  # normalised EHR
    norm_stats: dict
    enc_cfg: en.EncoderConfig
    student: dict
    tokens: di.TokenSet
    Z: np.ndarray                  # [n, N, d_I] Stage-I token features
    align_cfg: pa.AlignConfig
    fusion: dict | None = None
    router: dict | None = None
    corpus: tc.PromptCorpus | None = None
    trace1: list = field(default_factory=list)
    trace2: list = field(default_factory=list)
    access: dict = field(default_factory=dict)
    checkpoints: dict = field(default_factory=dict)
    tuned: dict | None = None      # student after Stage-II fine-tuning, if enabled
    Z_align_in: np.ndarray | None = None


def _norm_stats(ehr_rows) -> dict:
    return sg.ehr_norm_stats(ehr_rows)


def fit_representations(cfg: ExperimentConfig, pool: Pool, seed: int, run_dir=None, stage2: bool = True) -> RepState:
    ecfg, dcfg, acfg = cfg.encoder_cfg(), cfg.distill_cfg(), cfg.align_cfg()
    stats = _norm_stats(pool.ehr[pool.train])
    e = sg.normalize_ehr(pool.ehr, stats)
    run_dir = Path(run_dir) if run_dir is not None else None
    stage = "stage1"
    try:
        tokens = di.build_tokens(pool.studies, ecfg)
        fit = pool.fit_rows
        sub = di.TokenSet(tokens.sax[fit], tokens.lax[fit], tokens.phases, tokens.sax_prov, tokens.sax_patch)
        student, _, _, trace1 = di.train_stage1(sub, ecfg, dcfg, seed,
                                                run_dir / "stage1" if run_dir else None,
                                                [pool.ids[i] for i in fit])
        Z = di.encode_all(student, ecfg, tokens.sax)
        state = RepState(pool, e, stats, ecfg, student, tokens, Z, acfg, trace1=trace1,
                         access={"stage1": [pool.ids[i] for i in fit]})
        if run_dir:
            state.checkpoints["stage1"] = str(run_dir / "stage1" / "checkpoint")
        if stage2:
            stage = "stage2"
            corpus = tc.generate_corpus(cfg.prompts.get("n_per_sample", 50), cfg.prompts.get("seed", 0))
            fine_tune = not acfg.freeze_encoder
            # fine-tuning feeds raw patch values and lets Stage II update the student
            data = pa.Stage2Data(tokens.sax if fine_tune else Z, e, np.arange(len(pool.ids)))
            fusion, router, trace2, tuned = pa.train_stage2(
                data, pool.train, pool.val, corpus, acfg, seed, run_dir / "stage2" if run_dir else None,
                encoder=({k: v.copy() for k, v in student.items()}, ecfg) if fine_tune else None)
            if tuned is not None:
                state.tuned = tuned
                state.Z_align_in = di.encode_all(tuned, ecfg, tokens.sax)
            state.fusion, state.router, state.corpus, state.trace2 = fusion, router, corpus, trace2
            state.access["stage2"] = [pool.ids[i] for i in fit]
            if run_dir:
                corpus.write_jsonl(run_dir / "stage2" / "prompts.jsonl")
                state.checkpoints["stage2"] = str(run_dir / "stage2" / "checkpoint")
    except Exception as exc:  # noqa: BLE001 - recorded in the partial-run marker
        if run_dir:
            _mark_partial(run_dir, stage, exc)
        raise PipelineError(stage, exc) from exc
    return state


def image_features(state: RepState, variant: str, prompt: str | None = None):
    if variant == "ehr_only":
        return None, []
    if variant == "no_stage2":
        r = state.Z.mean(axis=1).astype(np.float64)
    else:
        Z = state.Z if state.Z_align_in is None else state.Z_align_in
        r = pa.align_features(Z, prompt or NEUTRAL_PROMPT, state.fusion, state.align_cfg)
    return r, [f"img_{k}" for k in range(r.shape[1])]


@dataclass
class Stage3Result:
    model: sv.CoxModel
    X: np.ndarray
    names: list
    risks: np.ndarray          # for every pool row
    lam: float
    val_c: float
    kept: list


def design_matrix(state: RepState, variant: str = "full", prompt: str | None = None, alpha=None):
    """[EHR; image] features for every pool row. ``alpha`` restricts/weights EHR groups."""
    e = state.e
    names = list(sg.FEATURE_NAMES)
    if alpha is not None:
        alpha = np.asarray(alpha, dtype=float)
        if not alpha.any():
            raise ValueError("prompt selects no features")
        gi = sg.group_indices()
        cols, w = [], []
        for g, a in zip(sg.GROUPS, alpha):
            if a > 0:
                cols.extend(gi[g].tolist())
                w.extend([a] * len(gi[g]))
        e = e[:, cols] * np.array(w)
        names = [names[c] for c in cols]
    r, rnames = image_features(state, variant, prompt)
    return sv.fuse_features(e, r), names + rnames


def stage3(cfg: ExperimentConfig, state: RepState, variant: str = "full", prompt: str | None = None,
           alpha=None) -> Stage3Result:
    """Cox head: lambda chosen on validation C-index, then refit on train+val."""
    pool = state.pool
    X, names = design_matrix(state, variant, prompt, alpha)
    scfg = cfg.survival
    kept = list(range(X.shape[1]))
    tr, va = pool.train, pool.val
    if scfg.get("lasso_alpha"):
        Xs = (X - X[tr].mean(0)) / np.where(X[tr].std(0) > 0, X[tr].std(0), 1.0)
        kept = sv.lasso_select(Xs[tr], pool.time[tr], pool.event[tr], scfg["lasso_alpha"]).tolist() or kept
        X = X[:, kept]
        names = [names[k] for k in kept]
    lam, c_val = sv.select_lambda(X[tr], pool.time[tr], pool.event[tr], X[va], pool.time[va], pool.event[va],
                                  grid=tuple(scfg.get("lambda_grid", (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0))))
    fit = pool.fit_rows if scfg.get("refit_on_val", True) else tr
    model = sv.fit_cox(X[fit], pool.time[fit], pool.event[fit], lam, standardize=True, feature_names=names)
    return Stage3Result(model, X, names, model.predict_risk(X), lam, c_val, kept)


def restore_state(cfg: ExperimentConfig, pool: Pool, stage1_ckpt, stage2_ckpt=None) -> RepState:
    """Rebuild a RepState from saved Stage I (and optionally Stage II) checkpoints."""
    student, _, _, ecfg, _ = di.load_stage1(stage1_ckpt)
    stats = _norm_stats(pool.ehr[pool.train])
    tokens = di.build_tokens(pool.studies, ecfg)
    Z = di.encode_all(student, ecfg, tokens.sax)
    state = RepState(pool, sg.normalize_ehr(pool.ehr, stats), stats, ecfg, student, tokens, Z, cfg.align_cfg())
    if stage2_ckpt is not None:
        fusion, router, acfg, _, tuned = pa.load_stage2(stage2_ckpt)
        state.fusion, state.router, state.align_cfg = fusion, router, acfg
        if tuned is not None:
            state.tuned = tuned
            state.Z_align_in = di.encode_all(tuned, ecfg, tokens.sax)
    return state


def pool_from_manifest(manifest: dict) -> Pool:
    """Re-assemble the subjects of a finished run from its manifest."""
    cohorts = {cid: load_prepared(p) for cid, p in manifest["cohort_paths"].items()}
    rows = {"train": manifest["train_ids"], "val": manifest["val_ids"], "test": manifest["test_ids"]}
    by_id = {}
    for c in cohorts.values():
        for i, s in enumerate(c.ids):
            by_id[s] = (c, i)
    blocks = [(rows["train"], "train"), (rows["val"], "val"), (rows["test"], "test")]
    ids, ehr, t, e, studies, coh, cent = [], [], [], [], [], [], []
    roles = {"train": [], "val": [], "test": []}
    centres = {cid: c.lv_centres() for cid, c in cohorts.items()}
    paths = dict(manifest["cohort_paths"])
    for sub, role in blocks:
        for s in sub:
            c, i = by_id[s]
            roles[role].append(len(ids))
            ids.append(s)
            ehr.append(c.ehr[i])
            t.append(c.time[i])
            e.append(c.event[i])
            studies.append(c.studies[i])
            coh.append(c.cohort_id)
            cent.append(centres[c.cohort_id][i])
    return Pool(ids, np.array(ehr), np.array(t), np.array(e), studies, coh,
                np.array(roles["train"], int), np.array(roles["val"], int), np.array(roles["test"], int), cent,
                paths)


def _setting_name(setting: str, variant: str) -> str:
    return setting if variant == "full" else f"{setting}.{variant}"


def run_dir_for(out_root, cohort_id, setting, seed) -> Path:
    return Path(out_root) / "runs" / cohort_id / setting / str(seed)


def _mark_partial(run_dir, stage, exc):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "PARTIAL.json").write_text(json.dumps(
        {"stage": stage, "cause": f"{type(exc).__name__}: {exc}",
         "traceback": traceback.format_exception_only(type(exc), exc)}, indent=1))


def write_run(run_dir, cfg, state: RepState, res: Stage3Result, seed, cohort_id, setting, variant):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    pool = state.pool
    te = pool.test
    report = em.evaluate(res.risks[te], pool.time[te], pool.event[te], seed=seed, cohort=cohort_id,
                         setting=setting, horizons=cfg.horizons)
    report.write(run_dir / "metrics.json")
    res.model.save(run_dir / "cox.json")
    try:
        em.write_km_csv(run_dir / "km.csv", em.km_by_risk(res.risks[te], pool.time[te], pool.event[te]))
    except ValueError:
        pass
    _write_regression(run_dir / "regression.csv", res.risks[te], pool.time[te], pool.event[te])
    with open(run_dir / "risks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "role", "risk", "time_months", "event"])
        role = np.full(len(pool.ids), "train", dtype=object)
        role[pool.val] = "val"
        role[te] = "test"
        for i, s in enumerate(pool.ids):
            w.writerow([s, role[i], f"{res.risks[i]:.10g}", f"{pool.time[i]:.10g}", int(pool.event[i])])
    test_ids = [pool.ids[i] for i in te]
    (run_dir / "test_ids.json").write_text(json.dumps(test_ids))
    manifest = {
        "cohort": cohort_id, "setting": setting, "variant": variant, "seed": int(seed),
        "config_digest": cfg.digest(), "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "train_ids": [pool.ids[i] for i in pool.train], "val_ids": [pool.ids[i] for i in pool.val],
        "test_ids": test_ids, "train_cohorts": sorted({pool.cohort_of[i] for i in pool.fit_rows}),
        "access": state.access, "lambda": res.lam, "val_c_index": res.val_c,
        "norm_stats": state.norm_stats, "feature_names": res.names,
        "cohort_paths": pool.paths, "checkpoints": state.checkpoints,
        "eval_prompt": cfg.prompts.get("eval_prompt"),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return report


def _write_regression(path, risks, time_, event):
    try:
        fit = em.risk_time_regression(risks, time_, event)
    except ValueError:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["inv_risk_norm", "time_norm", "event", "band_lo", "band_hi"])
        for row in zip(fit.x, fit.y, fit.event, fit.band_lo, fit.band_hi):
            w.writerow([f"{row[0]:.8g}", f"{row[1]:.8g}", int(row[2]), f"{row[3]:.8g}", f"{row[4]:.8g}"])


def run_pipeline(cfg: ExperimentConfig, cohort: CohortData, seed: int, out_root=None, setting: str = "internal",
                 variants=("full",), sources=None, return_state: bool = False):
    """Stage I -> II -> III on one split; returns {setting name: MetricsReport}."""
    split = make_splits(cohort.ids, cohort.event, cfg.splits, seed, cohort.cohort_id)
    src = None
    if sources is not None:
        src = [(c, make_splits(c.ids, c.event, cfg.splits, seed, c.cohort_id)) for c in sources]
    pool = build_pool(cohort, split, src)
    names = {v: _setting_name(setting, v) for v in variants}
    main_dir = run_dir_for(out_root, cohort.cohort_id, names[variants[0]], seed) if out_root else None
    t0 = time.time()
    need_images = any(v != "ehr_only" for v in variants)
    need_stage2 = "full" in variants
    state = None
    if need_images:
        state = fit_representations(cfg, pool, seed, main_dir, stage2=need_stage2)
    else:
        stats = _norm_stats(pool.ehr[pool.train])
        state = RepState(pool, sg.normalize_ehr(pool.ehr, stats), stats, cfg.encoder_cfg(), {}, None, None,
                         cfg.align_cfg())
    reports, fits = {}, {}
    for v in variants:
        sdir = run_dir_for(out_root, cohort.cohort_id, names[v], seed) if out_root else None
        try:
            res = stage3(cfg, state, v, cfg.prompts.get("eval_prompt"))
        except Exception as exc:  # noqa: BLE001
            if sdir:
                _mark_partial(sdir, "stage3", exc)
            raise PipelineError("stage3", exc) from exc
        state.access["stage3"] = [pool.ids[i] for i in pool.fit_rows]
        if sdir:
            reports[names[v]] = write_run(sdir, cfg, state, res, seed, cohort.cohort_id, names[v], v)
        else:
            te = pool.test
            reports[names[v]] = em.evaluate(res.risks[te], pool.time[te], pool.event[te], seed, cohort.cohort_id,
                                            names[v], cfg.horizons)
        fits[names[v]] = res
    log.info("run %s seed %d done in %.1fs", cohort.cohort_id, seed, time.time() - t0)
    return (reports, state, fits) if return_state else reports


def run_iecv(cfg: ExperimentConfig, cohorts: list, out_root, seeds=None, variants=("full",)) -> dict:
    """Internal and leave-cohort-out external runs for every cohort and seed."""
    if len(cohorts) < 2:
        raise ValueError("IECV needs at least two cohorts")
    seeds = list(seeds if seeds is not None else cfg.seeds)
    results = {}
    for c in cohorts:
        others = [o for o in cohorts if o.cohort_id != c.cohort_id]
        for s in seeds:
            results.update({(c.cohort_id, k, s): v for k, v in
                            run_pipeline(cfg, c, s, out_root, "internal", variants).items()})
            results.update({(c.cohort_id, k, s): v for k, v in
                            run_pipeline(cfg, c, s, out_root, "external", variants, sources=others).items()})
    return results


# ---------------------------------------------------------------------------
# BiPromptSurv
# ---------------------------------------------------------------------------

def biprompt_surv(cfg: ExperimentConfig, cohort: CohortData, prompt: str, seeds=None, out_root=None) -> dict:
    """Prompt-restricted Stage III against the all-EHR pipeline, per seed."""
    seeds = list(seeds if seeds is not None else cfg.seeds)
    per_seed, base = [], []
    alpha = None
    for s in seeds:
        split = make_splits(cohort.ids, cohort.event, cfg.splits, s, cohort.cohort_id)
        pool = build_pool(cohort, split)
        state = fit_representations(cfg, pool, s)
        alpha = pa.route(prompt, state.router)
        te = pool.test
        full = stage3(cfg, state, "full", cfg.prompts.get("eval_prompt"))
        arm = stage3(cfg, state, "full", prompt, alpha=alpha)
        h = cfg.horizons or em.default_horizons(pool.time[te], pool.event[te])
        base.append(_metric_row(s, full.risks[te], pool.time[te], pool.event[te], h))
        row = _metric_row(s, arm.risks[te], pool.time[te], pool.event[te], h)
        row["n_ehr_features"] = int(sum(1 for n in arm.names if not n.startswith("img_")))
        per_seed.append(row)
    mean_delta = {k: float(np.mean([a[k] - b[k] for a, b in zip(per_seed, base)])) for k in ("c_index", "auc")}
    report = {"prompt": prompt, "alpha": dict(zip(sg.GROUPS, map(float, alpha))), "per_seed_metrics": per_seed,
              "baseline_metrics": base, "mean_delta": mean_delta}
    if out_root is not None:
        d = Path(out_root) / "biprompt"
        d.mkdir(parents=True, exist_ok=True)
        tag = hashlib.sha1(prompt.encode()).hexdigest()[:10]
        (d / f"{cohort.cohort_id}_{tag}.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    return report


def _metric_row(seed, risks, t, e, horizons):
    aucs = []
    for h in horizons:
        try:
            aucs.append(em.td_auc(risks, t, e, h))
        except ValueError:
            pass
    return {"seed": int(seed), "c_index": float(em.c_index(risks, t, e)),
            "auc": float(np.mean(aucs)) if aucs else float("nan")}


# ---------------------------------------------------------------------------
# interpretation of a run
# ---------------------------------------------------------------------------

def interpret_state(state: RepState, risks: np.ndarray, out_dir=None, rows=None, write_rows=None,
                    model=None, X=None, names=None, shap_rows=None, shap_samples: int = 200,
                    seed: int = 0, prompt: str | None = None) -> dict:
    """Heatmaps and segment masses/KDE per risk tertile over ``rows``; permutation
    SHAP of ``model`` on ``shap_rows`` when a model is given.

    Three maps per study: encoder rollout ("rollout"), raw Stage-II cross-attention
    ("cross") and cross-attention pushed through the rollout ("composed"). The
    composed map is the primary one whenever Stage-II weights exist.
    """
    pool = state.pool
    rows = np.arange(len(pool.ids)) if rows is None else np.asarray(rows)
    write_rows = set(pool.test.tolist() if write_rows is None else np.asarray(write_rows).tolist())
    student = state.tuned if state.tuned is not None else state.student
    _, attn = di.encode_all(student, state.enc_cfg, state.tokens.sax[rows], keep_attn=True)
    cross = None
    if state.fusion is not None:
        Z = state.Z if state.Z_align_in is None else state.Z_align_in
        _, cross = pa.align_features(Z[rows], prompt or NEUTRAL_PROMPT, state.fusion, state.align_cfg,
                                     return_attn=True)
    levels = ip.risk_levels(risks[rows])
    D, T, H0, W0 = pool.studies[rows[0]].sax.shape
    k = state.enc_cfg.student_pool
    shape = (D, T, H0 // k, W0 // k)
    kinds = ("rollout",) if cross is None else ("composed", "cross", "rollout")
    maps = {kd: [] for kd in kinds}
    centres, labels = [], []
    for j, i in enumerate(rows):
        R = ip.attention_rollout(list(attn[j]))
        rel = {"rollout": R[0, 1:]}
        if cross is not None:
            w = ip.cross_attention_relevance(cross[j])
            rel["cross"] = w
            rel["composed"] = ip.composed_relevance(w, R)
        for kd in kinds:
            frames = ip.relevance_to_frames(rel[kd], state.tokens.sax_prov, state.tokens.sax_patch, shape, upsample=k)
            maps[kd].append(ip.normalize_heatmap(frames))
        centres.append(pool.lv_centres[i] or ((H0 - 1) / 2, (W0 - 1) / 2))
        labels.append(pool.studies[i].phase_labels)
    primary = kinds[0]
    out = {"rows": rows, "levels": levels, "centres": centres, "primary": primary, "maps": maps,
           "heatmaps": maps[primary],
           "segment_mass": ip.segment_mass_table(maps[primary], centres, levels),
           "segment_mass_by_map": {kd: ip.segment_mass_table(maps[kd], centres, levels) for kd in kinds},
           "kde": ip.segment_phase_kde(maps[primary], centres, labels, levels)}
    if model is not None:
        shap_rows = pool.test if shap_rows is None else np.asarray(shap_rows)
        bg = X[pool.fit_rows]
        f = model.predict_risk
        phi = np.array([ip.shap_sampling(f, X[i], bg, shap_samples, seed + int(i)).phi for i in shap_rows])
        out["shap"] = phi
        out["shap_rows"] = shap_rows
        out["shap_report"] = ip.aggregate_attributions(phi, names, sg.FEATURE_GROUP)
    if out_dir is not None:
        _write_interpretation(Path(out_dir), pool, out, write_rows, names)
    return out


def _write_interpretation(d: Path, pool: Pool, out: dict, write_rows, names):
    for kd, maps in out["maps"].items():
        sub = d / ("heatmaps" if kd == out["primary"] else f"heatmaps_{kd}")
        sub.mkdir(parents=True, exist_ok=True)
        for j, i in enumerate(out["rows"]):
            if i not in write_rows:
                continue
            sid = pool.ids[i]
            labels = pool.studies[i].phase_labels
            for t, fr in enumerate(maps[j]):
                ip.write_heatmap(sub / f"{sid}_t{t:02d}.f32", fr, labels[t], out["levels"][j], subject_id=sid,
                                 frame=t, map=kd, center=list(map(float, out["centres"][j])))
    ip.write_kde_csv(d / "segment_kde.csv", out["kde"])
    with open(d / "segment_mass.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["map", "segment", "risk_level", "mean_mass"])
        for kd, tab in out["segment_mass_by_map"].items():
            for (s, lev), v in sorted(tab.items()):
                w.writerow([kd, s, lev, f"{v:.8g}"])
    with open(d / "risk_levels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject", "risk_level"])
        for j, i in enumerate(out["rows"]):
            w.writerow([pool.ids[i], out["levels"][j]])
    if "shap" in out:
        ip.write_shap_csv(d / "shap.csv", [pool.ids[i] for i in out["shap_rows"]], names, out["shap"])
        rep = out["shap_report"]
        ip.write_json(d / "shap_summary.json", {"group_share": rep.group_share, "aggregated_img": rep.aggregated_img,
                                                "top_img_dims": rep.top_img_dims, "top10": rep.top10})


def interpret_run(run_dir, out_dir=None, shap_samples: int = 200) -> dict:
    """Interpretation artefacts for a finished run directory."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    cfg = ExperimentConfig(**manifest["config"])
    pool = pool_from_manifest(manifest)
    ck = manifest["checkpoints"]
    variant = manifest["variant"]
    if variant == "ehr_only" or "stage1" not in ck:
        raise ValueError(f"{run_dir}: no Stage-I image pathway behind this model to interpret")
    state = restore_state(cfg, pool, ck["stage1"], ck.get("stage2") if variant == "full" else None)
    model = sv.CoxModel.load(run_dir / "cox.json")
    X, names = design_matrix(state, variant, manifest.get("eval_prompt"))
    col = {n: j for j, n in enumerate(names)}
    X = X[:, [col[n] for n in model.feature_names]]
    risks = model.predict_risk(X)
    return interpret_state(state, risks, out_dir or run_dir / "interpret", model=model, X=X,
                           names=list(model.feature_names), shap_samples=shap_samples, seed=manifest["seed"],
                           prompt=manifest.get("eval_prompt"))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _sd(v):
    v = np.asarray(v, dtype=float)
    return float(v.std(ddof=1)) if v.size > 1 else 0.0


def export_report(out_root) -> list:
    """Aggregate every run under ``out_root/runs`` into report/summary.{csv,json}."""
    root = Path(out_root)
    rows = []
    groups: dict = {}
    for setting_dir in sorted((root / "runs").glob("*/*")):
        cohort, setting = setting_dir.parent.name, setting_dir.name
        for seed_dir in sorted(setting_dir.iterdir()):
            if not seed_dir.is_dir():
                continue
            g = groups.setdefault((cohort, setting), {"metrics": {}, "partial": [], "expected": set()})
            mpath = seed_dir / "metrics.json"
            if (seed_dir / "manifest.json").exists():
                g["expected"].update(json.loads((seed_dir / "manifest.json").read_text()).get("seeds", []))
            if mpath.exists() and not (seed_dir / "PARTIAL.json").exists():
                g["metrics"][seed_dir.name] = json.loads(mpath.read_text())
            else:
                g["partial"].append(seed_dir.name)
    for (cohort, setting), g in sorted(groups.items()):
        m = g["metrics"]
        missing = sorted({str(s) for s in g["expected"]} - set(m) | set(g["partial"]))
        c = [v["c_index"] for v in m.values()]
        aucs = [np.mean([a for a in v["td_auc"].values() if a is not None]) for v in m.values()
                if any(a is not None for a in v["td_auc"].values())]
        ps = [v["logrank_p"] for v in m.values() if v.get("logrank_p")]
        fisher = dict(zip(("X2", "df", "p"), em.fisher_combine(ps))) if ps else None
        rows.append({
            "cohort": cohort, "setting": setting, "n_seeds": len(m),
            "c_index_mean": float(np.mean(c)) if c else None, "c_index_sd": _sd(c) if c else None,
            "auc_mean": float(np.mean(aucs)) if aucs else None, "auc_sd": _sd(aucs) if aucs else None,
            "fisher": fisher, "status": "incomplete" if missing or not m else "complete",
            "missing_seeds": missing,
        })
    rep = root / "report"
    rep.mkdir(parents=True, exist_ok=True)
    with open(rep / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cohort", "setting", "n_seeds", "c_index", "auc", "fisher_p", "status"])
        for r in rows:
            fmt = (lambda mu, sd: "" if mu is None else f"{mu:.4f}±{sd:.4f}")
            w.writerow([r["cohort"], r["setting"], r["n_seeds"], fmt(r["c_index_mean"], r["c_index_sd"]),
                        fmt(r["auc_mean"], r["auc_sd"]), "" if r["fisher"] is None else f"{r['fisher']['p']:.4g}",
                        r["status"]])
    (rep / "summary.json").write_text(json.dumps(rows, indent=1, sort_keys=True))
    _collect_csvs(root, rep)
    return rows


def _collect_csvs(root, rep):
    """Concatenate per-run KM and regression CSVs per cohort/setting; BiPromptSurv deltas."""
    for kind in ("km", "regression"):
        for setting_dir in sorted((root / "runs").glob("*/*")):
            files = sorted(setting_dir.glob(f"*/{kind}.csv"))
            if not files:
                continue
            out = rep / f"{kind}_{setting_dir.parent.name}_{setting_dir.name}.csv"
            with open(out, "w", newline="") as fh:
                w = csv.writer(fh)
                header = None
                for f in files:
                    with open(f) as src:
                        r = list(csv.reader(src))
                    if header is None:
                        header = ["seed"] + r[0]
                        w.writerow(header)
                    for line in r[1:]:
                        w.writerow([f.parent.name] + line)
    bp = sorted((root / "biprompt").glob("*.json")) if (root / "biprompt").exists() else []
    if bp:
        with open(rep / "biprompt_delta.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "prompt", "alpha", "delta_c_index", "delta_auc"])
            for f in bp:
                d = json.loads(f.read_text())
                w.writerow([f.name, d["prompt"], json.dumps(d["alpha"]), f"{d['mean_delta']['c_index']:.6f}",
                            f"{d['mean_delta']['auc']:.6f}"])
