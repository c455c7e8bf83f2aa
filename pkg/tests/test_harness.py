import json

import numpy as np
import pytest

from prismsurv import harness as h


def test_config_defaults_and_merge(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\nsurvival: {lambda_grid: [1.0]}\n")
    cfg = h.load_config(p, env={})
    assert cfg.seed == 3
    assert cfg.survival["lambda_grid"] == [1.0] and cfg.survival["refit_on_val"] is True
    assert h.load_config(None, env={}).seed == 0


def test_prism_seed_overrides(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("seed: 3\n")
    assert h.load_config(p, env={"PRISM_SEED": "17"}).seed == 17
    assert h.load_config(p, env={"PRISM_SEED": ""}).seed == 3


def test_config_rejects_unknown_and_bad_splits(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("sead: 3\n")
    with pytest.raises(ValueError, match="unknown"):
        h.load_config(p, env={})
    p.write_text("splits: {train: 0.5, val: 0.2, test: 0.2}\n")
    with pytest.raises(ValueError):
        h.load_config(p, env={})


def test_config_digest_tracks_content(tiny_cfg):
    import copy
    c2 = copy.deepcopy(tiny_cfg)
    assert c2.digest() == tiny_cfg.digest()
    c2.distill["epochs"] = 2
    assert c2.digest() != tiny_cfg.digest()


def _toy(n=50, events=20, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"s{i:03d}" for i in range(n)]
    ev = np.zeros(n, int)
    ev[rng.choice(n, events, replace=False)] = 1
    return ids, ev


def test_splits_partition_stratified_deterministic():
    ids, ev = _toy()
    s = h.make_splits(ids, ev, (0.6, 0.2, 0.2), seed=4)
    parts = [s.train, s.val, s.test]
    assert sorted(sum(parts, [])) == sorted(ids)
    assert [len(p) for p in parts] == [30, 10, 10]
    evd = dict(zip(ids, ev))
    for p in parts:
        assert abs(np.mean([evd[i] for i in p]) - 0.4) <= 0.1
    assert h.make_splits(ids, ev, (0.6, 0.2, 0.2), seed=4) == s
    assert h.make_splits(ids, ev, (0.6, 0.2, 0.2), seed=5).test != s.test


def test_splits_reject_degenerate():
    ids, ev = _toy(50, 2)
    with pytest.raises(ValueError, match="too few events"):
        h.make_splits(ids, ev)
    ids, ev = _toy(6, 3)
    with pytest.raises(ValueError, match="too small"):
        h.make_splits(ids, ev)


def test_external_pool_uses_target_test_only(tiny_cfg, tiny_cohorts):
    a, b = tiny_cohorts
    sa = h.make_splits(a.ids, a.event, tiny_cfg.splits, 0, a.cohort_id)
    sb = h.make_splits(b.ids, b.event, tiny_cfg.splits, 0, b.cohort_id)
    pool = h.build_pool(a, sa, [(b, sb)])
    assert {pool.cohort_of[i] for i in pool.fit_rows} == {"tiny2"}
    assert [pool.ids[i] for i in pool.test] == sa.test
    assert {pool.cohort_of[i] for i in pool.test} == {"tiny"}


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, tiny_cfg, tiny_cohorts):
    out = tmp_path_factory.mktemp("run")
    reps = h.run_pipeline(tiny_cfg, tiny_cohorts[0], 0, out, variants=("full", "no_stage2", "ehr_only"))
    return out, reps


def test_run_writes_artifacts(tiny_run):
    out, reps = tiny_run
    assert set(reps) == {"internal", "internal.no_stage2", "internal.ehr_only"}
    d = h.run_dir_for(out, "tiny", "internal", 0)
    for f in ("metrics.json", "cox.json", "km.csv", "risks.csv", "test_ids.json", "manifest.json",
              "stage1/checkpoint/params.f32", "stage1/losses.csv", "stage2/checkpoint/manifest.json",
              "stage2/losses.csv", "stage2/prompts.jsonl"):
        assert (d / f).exists(), f
    man = json.loads((d / "manifest.json").read_text())
    assert not set(man["test_ids"]) & set(man["train_ids"] + man["val_ids"])
    assert man["access"]["stage1"] == man["access"]["stage2"] == man["train_ids"] + man["val_ids"]
    assert man["train_cohorts"] == ["tiny"] and man["lambda"] in (1.0, 10.0)
    m = json.loads((d / "metrics.json").read_text())
    assert 0.0 <= m["c_index"] <= 1.0 and m["cohort"] == "tiny"


def test_metrics_byte_identical_on_repeat(tiny_run, tmp_path, tiny_cfg, tiny_cohorts):
    out, _ = tiny_run
    h.run_pipeline(tiny_cfg, tiny_cohorts[0], 0, tmp_path, variants=("full", "no_stage2", "ehr_only"))
    for setting in ("internal", "internal.no_stage2", "internal.ehr_only"):
        a = (h.run_dir_for(out, "tiny", setting, 0) / "metrics.json").read_bytes()
        b = (h.run_dir_for(tmp_path, "tiny", setting, 0) / "metrics.json").read_bytes()
        assert a == b, setting


def test_interpret_run(tiny_run, tmp_path):
    out, _ = tiny_run
    res = h.interpret_run(h.run_dir_for(out, "tiny", "internal", 0), tmp_path, shap_samples=8)
    assert res["primary"] == "composed"
    for sub in ("heatmaps", "heatmaps_cross", "heatmaps_rollout"):
        assert len(list((tmp_path / sub).glob("*.f32"))) == 6 * 12
    for f in ("segment_kde.csv", "segment_mass.csv", "risk_levels.csv", "shap.csv", "shap_summary.json"):
        assert (tmp_path / f).exists()
    assert abs(sum(res["shap_report"].group_share.values()) - 100.0) < 1e-6
    rows = (tmp_path / "segment_mass.csv").read_text().splitlines()
    assert rows[0] == "map,segment,risk_level,mean_mass" and len(rows) == 1 + 3 * 6 * 3


def test_interpret_no_stage2_falls_back_to_rollout(tiny_run, tmp_path):
    out, _ = tiny_run
    res = h.interpret_run(h.run_dir_for(out, "tiny", "internal.no_stage2", 0), tmp_path, shap_samples=4)
    assert res["primary"] == "rollout" and not (tmp_path / "heatmaps_cross").exists()


def test_interpret_ehr_only_refused(tiny_run):
    out, _ = tiny_run
    with pytest.raises(ValueError, match="Stage-I"):
        h.interpret_run(h.run_dir_for(out, "tiny", "internal.ehr_only", 0))


def test_partial_marker_and_incomplete_report(tmp_path, tiny_cfg, tiny_cohorts, monkeypatch):
    import copy
    cfg = copy.deepcopy(tiny_cfg)
    h.run_pipeline(cfg, tiny_cohorts[0], 0, tmp_path, variants=("ehr_only",))

    def boom(*a, **k):
        raise FloatingPointError("diverged")

    monkeypatch.setattr(h, "stage3", boom)
    with pytest.raises(h.PipelineError) as ei:
        h.run_pipeline(cfg, tiny_cohorts[0], 1, tmp_path, variants=("ehr_only",))
    assert ei.value.stage == "stage3"
    marker = h.run_dir_for(tmp_path, "tiny", "internal.ehr_only", 1) / "PARTIAL.json"
    assert json.loads(marker.read_text())["stage"] == "stage3"
    rows = h.export_report(tmp_path)
    (row,) = rows
    assert row["status"] == "incomplete" and row["missing_seeds"] == ["1"] and row["n_seeds"] == 1
    assert (tmp_path / "report" / "summary.csv").exists()
    assert (tmp_path / "report" / "km_tiny_internal.ehr_only.csv").exists()


def test_report_complete_with_fisher(tmp_path, tiny_cfg, tiny_cohorts):
    for s in tiny_cfg.seeds:
        h.run_pipeline(tiny_cfg, tiny_cohorts[0], s, tmp_path, variants=("ehr_only",))
    (row,) = h.export_report(tmp_path)
    assert row["status"] == "complete" and row["n_seeds"] == 2
    ms = [json.loads((h.run_dir_for(tmp_path, "tiny", "internal.ehr_only", s) / "metrics.json").read_text())
          for s in tiny_cfg.seeds]
    c = [m["c_index"] for m in ms]
    assert row["c_index_mean"] == pytest.approx(np.mean(c))
    assert row["c_index_sd"] == pytest.approx(np.std(c, ddof=1))


def test_iecv_test_sets_identical(tmp_path, tiny_cfg, tiny_cohorts):
    res = h.run_iecv(tiny_cfg, list(tiny_cohorts), tmp_path, seeds=[0], variants=("ehr_only",))
    assert len(res) == 4
    for cid in ("tiny", "tiny2"):
        a = (h.run_dir_for(tmp_path, cid, "internal.ehr_only", 0) / "test_ids.json").read_bytes()
        b = (h.run_dir_for(tmp_path, cid, "external.ehr_only", 0) / "test_ids.json").read_bytes()
        assert a == b
        man = json.loads((h.run_dir_for(tmp_path, cid, "external.ehr_only", 0) / "manifest.json").read_text())
        assert cid not in man["train_cohorts"]
    with pytest.raises(ValueError):
        h.run_iecv(tiny_cfg, [tiny_cohorts[0]], tmp_path)


def test_biprompt(tmp_path, tiny_cfg, tiny_cohorts):
    rep = h.biprompt_surv(tiny_cfg, tiny_cohorts[0], "use only the clinical history", [0], tmp_path)
    assert set(rep["alpha"]) == {"clinical", "physiological", "biochemical", "pharmaceutical"}
    assert len(rep["per_seed_metrics"]) == len(rep["baseline_metrics"]) == 1
    assert len(list((tmp_path / "biprompt").glob("tiny_*.json"))) == 1


def test_all_zero_alpha_raises(tiny_cfg, tiny_cohorts):
    c = tiny_cohorts[0]
    pool = h.build_pool(c, h.make_splits(c.ids, c.event, tiny_cfg.splits, 0, c.cohort_id))
    state = h.RepState(pool, pool.ehr, {}, tiny_cfg.encoder_cfg(), {}, None, None, tiny_cfg.align_cfg())
    with pytest.raises(ValueError, match="selects no features"):
        h.design_matrix(state, "ehr_only", alpha=[0, 0, 0, 0])
