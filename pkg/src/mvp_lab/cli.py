"""Command-line entry point: mvp-lab <command>.

Commands: gen-data, pretrain, probe, ablate, gradcheck, report. Configs
are JSON files matching harness.RunConfig; any field can be overridden on
the command line with --set dotted.key=value.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness, synthcorpus
from .harness import GRADCHECK_OPS, RunConfig, config_hash


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        with open(args.config) as f:
            cfg = RunConfig.from_dict(json.load(f))
    else:
        cfg = RunConfig()
    for override in getattr(args, "set", None) or []:
        key, _, value = override.partition("=")
        if not value:
            raise SystemExit(f"bad --set override {override!r}; expected key=value")
        cfg = harness.set_by_dotted(cfg, key, json.loads(value) if _is_json(value) else value)
    if getattr(args, "n_obs", None) is not None:
        cfg = harness.set_by_dotted(cfg, "pair.n_obs", args.n_obs)
    if getattr(args, "n_future", None) is not None:
        cfg = harness.set_by_dotted(cfg, "pair.n_future", args.n_future)
    if getattr(args, "stride", None) is not None:
        cfg = harness.set_by_dotted(cfg, "pair.stride", args.stride)
    if getattr(args, "offset", None) is not None:
        cfg = harness.set_by_dotted(cfg, "pair.offset", args.offset)
    if getattr(args, "out", None):
        cfg = harness.set_by_dotted(cfg, "out_dir", args.out)
    return cfg


def _is_json(text: str) -> bool:
    try:
        json.loads(text)
        return True
    except json.JSONDecodeError:
        return False


def cmd_gen_data(args):
    grammar = synthcorpus.build_grammar(args.seed, args.verbs, args.nouns, args.complex_actions)
    corpus = synthcorpus.generate_corpus(
        grammar, args.seed, args.videos, args.clips_per_video,
        frame_hw=(args.frame_size, args.frame_size), noise_sigma=args.noise)
    synthcorpus.save_corpus(corpus, args.out)
    print(f"wrote {corpus.n_videos} videos ({corpus.clips_per_video} clips each) to {args.out}")


def cmd_pretrain(args):
    cfg = _load_config(args)
    result = harness.run_pretrain(cfg, quiet=args.quiet)
    last = result.metrics.records[-1]
    print(f"run dir: {result.out_dir}")
    print(f"config hash: {config_hash(cfg)}")
    print(f"final step {last['step']}: loss {last['loss_mean']:.4f}, "
          f"region accuracy {last['region_accuracy']:.3f}")
    print(f"checkpoints: {len(result.checkpoints)}")


def cmd_probe(args):
    cfg = _load_config(args) if args.config else None
    metrics = harness.run_probe(args.checkpoint, args.task, config=cfg,
                                out_path=args.out, force=args.force)
    for k, v in metrics.items():
        if isinstance(v, float):
            print(f"{k}: {v:.4f}")
    if args.out:
        print(f"metrics written to {args.out}")


def cmd_ablate(args):
    cfg = _load_config(args)
    with open(args.grid) as f:
        grid = json.load(f)
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = harness.run_ablation(cfg, grid, seeds, args.out, quiet=True)
    print(f"{len(rows)} aggregated rows -> {os.path.join(args.out, 'ablation.csv')}")
    for r in rows:
        if r["metric"] == "map_mean":
            print(f"  {r['arm']}: map_mean {r['mean']:.4f} +/- {r['std']:.4f} (n={r['seed_count']})")


def cmd_gradcheck(args):
    ops = GRADCHECK_OPS if args.op == "all" else [args.op]
    worst = 0.0
    for op in ops:
        err = harness.finite_diff_gradcheck(op, seed=args.seed, eps=args.eps)
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{op:22s} max rel err {err:.3e}  [{status}]")
        worst = max(worst, err)
    if worst >= 1e-4:
        sys.exit(1)


def cmd_report(args):
    report = harness.pretrain_probe_correlation(args.run_dir)
    print(f"checkpoints: {report['n_checkpoints']}")
    for s, a, m in zip(report["steps"], report["pretrain_accuracy"], report["map_mean"]):
        print(f"  step {s:6d}  pretrain acc {a:.3f}  probe map {m:.4f}")
    print(f"spearman rho: {report['spearman_rho']:.3f} (p={report['p_value']:.3g})")


def main(argv=None):
    parser = argparse.ArgumentParser(prog="mvp-lab",
                                     description="multiscale predictive video pretraining lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--videos", type=int, default=100)
    p.add_argument("--clips-per-video", type=int, default=24)
    p.add_argument("--frame-size", type=int, default=32)
    p.add_argument("--verbs", type=int, default=6)
    p.add_argument("--nouns", type=int, default=6)
    p.add_argument("--complex-actions", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.06)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run a pretraining job")
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config field, e.g. loss.objective=cpc")
    p.add_argument("--n-obs", type=int)
    p.add_argument("--n-future", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--offset", help="fixed:K or random:KMIN:KMAX")
    p.add_argument("--out", help="output directory")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="train and evaluate a frozen-backbone probe")
    p.add_argument("--task", choices=list(harness.PROBE_TASKS), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="optional config (hash-checked against checkpoint)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--force", action="store_true", help="skip config hash check")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="grid sweep of pretrain+probe runs")
    p.add_argument("--config", help="base RunConfig JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--grid", required=True, help="JSON file: dotted key -> value list")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--op", default="all", choices=["all", *GRADCHECK_OPS])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="pretrain-accuracy vs probe-mAP correlation")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
