"""Command-line entry point: ``prismsurv <subcommand> ... --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import distill as di
from . import harness as h
from . import motionprep as mp
from . import promptalign as pa
from . import synthgen as sg
from . import textcorpus as tc


def _cfg(args) -> h.ExperimentConfig:
    return h.load_config(getattr(args, "config", None))


def _seed(args, cfg) -> int:
    return cfg.seed if getattr(args, "seed", None) is None else args.seed


def _split_pool(cfg, cohort_dir, seed):
    cohort = h.load_prepared(cohort_dir)
    split = h.make_splits(cohort.ids, cohort.event, cfg.splits, seed, cohort.cohort_id)
    return cohort, h.build_pool(cohort, split)


def cmd_synth(args):
    cfg = _cfg(args)
    over = {k: v for k, v in (("n", args.n), ("seed", args.cohort_seed), ("cohort_id", args.cohort_id))
            if v is not None}
    spec = cfg.cohort_spec(**over)
    sg.generate_cohort(spec, args.out)
    print(f"wrote {spec.n} subjects to {args.out}")


def cmd_prep(args):
    cfg = _cfg(args)
    mp.prepare_cohort(args.input, args.out, cfg.flow_params(), cfg.prep.get("slices", "mid"),
                      cfg.prep.get("width", mp.ROI))
    print(f"prepared cohort written to {args.out}")


def cmd_stage1(args):
    cfg = _cfg(args)
    seed = _seed(args, cfg)
    _, pool = _split_pool(cfg, args.cohort, seed)
    out = Path(args.out)
    ecfg = cfg.encoder_cfg()
    tokens = di.build_tokens(pool.studies, ecfg)
    fit = pool.fit_rows
    sub = di.TokenSet(tokens.sax[fit], tokens.lax[fit], tokens.phases, tokens.sax_prov, tokens.sax_patch)
    di.train_stage1(sub, ecfg, cfg.distill_cfg(), seed, out, [pool.ids[i] for i in fit])
    print(f"stage-1 checkpoint: {out / 'checkpoint'}")


def cmd_stage2(args):
    cfg = _cfg(args)
    seed = _seed(args, cfg)
    _, pool = _split_pool(cfg, args.cohort, seed)
    state = h.restore_state(cfg, pool, args.stage1)
    corpus = (tc.load_corpus(args.prompts, cfg.prompts.get("n_per_sample", 50), cfg.prompts.get("seed", 0))
              if args.prompts else tc.generate_corpus(cfg.prompts.get("n_per_sample", 50), cfg.prompts.get("seed", 0)))
    data = pa.Stage2Data(state.Z, state.e, np.arange(len(pool.ids)))
    out = Path(args.out)
    pa.train_stage2(data, pool.train, pool.val, corpus, cfg.align_cfg(), seed, out)
    corpus.write_jsonl(out / "prompts.jsonl")
    print(f"stage-2 checkpoint: {out / 'checkpoint'}")


def cmd_stage3(args):
    cfg = _cfg(args)
    seed = _seed(args, cfg)
    cohort, pool = _split_pool(cfg, args.cohort, seed)
    variant = args.variant or ("full" if args.stage2 else "no_stage2")
    if variant == "full" and not args.stage2:
        raise SystemExit("--stage2 checkpoint required for the full variant")
    if variant == "ehr_only":
        stats = h._norm_stats(pool.ehr[pool.train])
        state = h.RepState(pool, sg.normalize_ehr(pool.ehr, stats), stats, cfg.encoder_cfg(), {}, None, None,
                           cfg.align_cfg())
    else:
        state = h.restore_state(cfg, pool, args.stage1, args.stage2 if variant == "full" else None)
        state.checkpoints = {"stage1": str(args.stage1), **({"stage2": str(args.stage2)} if args.stage2 else {})}
    res = h.stage3(cfg, state, variant, cfg.prompts.get("eval_prompt"))
    rep = h.write_run(args.out, cfg, state, res, seed, cohort.cohort_id, h._setting_name("internal", variant), variant)
    print(json.dumps(rep.to_dict(), sort_keys=True))


def cmd_eval(args):
    cfg = _cfg(args)
    cohort = h.load_prepared(args.cohort)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    variants = tuple(args.variants.split(","))
    failed = 0
    for s in seeds:
        try:
            reps = h.run_pipeline(cfg, cohort, s, args.out, "internal", variants)
        except h.PipelineError as err:
            failed += 1
            print(f"seed {s}: {err}", file=sys.stderr)
            continue
        for k, r in reps.items():
            print(f"{cohort.cohort_id} {k} seed {s}: C={r.c_index:.4f}")
    return 1 if failed else 0


def cmd_iecv(args):
    cfg = _cfg(args)
    cohorts = [h.load_prepared(p) for p in args.cohorts]
    seeds = [args.seed] if args.seed is not None else None
    res = h.run_iecv(cfg, cohorts, args.out, seeds, tuple(args.variants.split(",")))
    for (cid, setting, s), r in sorted(res.items()):
        print(f"{cid} {setting} seed {s}: C={r.c_index:.4f}")


def cmd_interpret(args):
    out = h.interpret_run(args.run, args.out, args.shap_samples)
    rep = out.get("shap_report")
    if rep is not None:
        print("group shares (%):", json.dumps({k: round(v, 2) for k, v in rep.group_share.items()}))
    print(f"interpretation written to {args.out}")


def cmd_biprompt(args):
    cfg = _cfg(args)
    cohort = h.load_prepared(args.cohort)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    rep = h.biprompt_surv(cfg, cohort, args.prompt, seeds, args.out)
    print(json.dumps({"alpha": rep["alpha"], "mean_delta": rep["mean_delta"]}))


def cmd_report(args):
    rows = h.export_report(args.out)
    for r in rows:
        c = "" if r["c_index_mean"] is None else f"{r['c_index_mean']:.4f}±{r['c_index_sd']:.4f}"
        print(f"{r['cohort']:12s} {r['setting']:24s} n={r['n_seeds']} C={c} {r['status']}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prismsurv")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    def add(name, fn, help_, config=True, seed=False):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        sp.add_argument("--out", required=True, help="output directory")
        if config:
            sp.add_argument("--config", help="YAML experiment config")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides the config seed")
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic cohort")
    sp.add_argument("--n", type=int)
    sp.add_argument("--cohort-seed", type=int)
    sp.add_argument("--cohort-id")
    sp = add("prep", cmd_prep, "optical-flow ROI cropping of a cohort")
    sp.add_argument("--in", dest="input", required=True)
    sp = add("stage1", cmd_stage1, "multi-view distillation pretraining", seed=True)
    sp.add_argument("--cohort", required=True)
    sp = add("stage2", cmd_stage2, "prompt-guided EHR alignment", seed=True)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--stage1", required=True)
    sp.add_argument("--prompts", help="prompt JSONL (generated when omitted)")
    sp = add("stage3", cmd_stage3, "Cox head on fused features", seed=True)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--stage1")
    sp.add_argument("--stage2")
    sp.add_argument("--variant", choices=h.VARIANTS)
    sp = add("eval", cmd_eval, "end-to-end internal runs", seed=True)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--variants", default="full")
    sp = add("iecv", cmd_iecv, "internal-external cross-validation", seed=True)
    sp.add_argument("--cohorts", nargs="+", required=True)
    sp.add_argument("--variants", default="full")
    sp = add("interpret", cmd_interpret, "rollout heatmaps, KDE and SHAP for a run", config=False)
    sp.add_argument("--run", required=True)
    sp.add_argument("--shap-samples", type=int, default=200)
    sp = add("biprompt", cmd_biprompt, "prompt-restricted secondary survival analysis")
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    add("report", cmd_report, "aggregate runs under --out", config=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return int(args.fn(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
