"""Command-line entry point.

Subcommands:
  gen-data   write a synthetic dataset (JSONL + raster sidecars)
  train      run one training stage from a JSON config
  eval       evaluate a checkpoint on a split; writes report.csv + figures
  compare    train + evaluate several schemes under one matched budget
  gradcheck  run the finite-difference suite over primitives and losses

Exit code 0 on success; failures print one machine-readable ERROR line to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def _cmd_gen_data(args):
    from .synthdata import generate_dataset, write_dataset

    mix = tuple(float(x) for x in args.mix.split(","))
    if len(mix) != 3:
        raise ValueError("mix must be three comma-separated ratios")
    fracs = tuple(float(x) for x in args.split_fracs.split(","))
    qw = None
    if args.query_weights:
        vals = [float(x) for x in args.query_weights.split(",")]
        if len(vals) != 3:
            raise ValueError("query-weights must be three comma-separated values")
        qw = dict(zip(("attribute", "largest", "relation"), vals))
    samples, scenes = generate_dataset(args.seed, args.n, mix, query_weights=qw)
    write_dataset(args.out, samples, scenes, split_fracs=fracs,
                  meta={"seed": args.seed, "mix": list(mix),
                        "query_weights": qw and [qw["attribute"], qw["largest"], qw["relation"]]})
    counts = {}
    for s in samples:
        counts[s.task] = counts.get(s.task, 0) + 1
    print(f"wrote {args.n} samples to {args.out} {json.dumps(counts, sort_keys=True)}")
    return 0


def _cmd_train(args):
    from .trainer import TrainConfig, run_stage

    cfg = TrainConfig.from_json(Path(args.config).read_text())
    if args.stage is not None:
        cfg.stage = args.stage
    if args.out:
        cfg.out_dir = args.out
    ckpt_in = args.init_from
    if args.resume:
        ckpt_in = cfg.out_dir
    _, rows = run_stage(cfg, checkpoint_in=ckpt_in)
    last = rows[-1] if rows else {}
    print(f"stage {cfg.stage} done: {cfg.out_dir} final={json.dumps(last, sort_keys=True)}")
    return 0


def _cmd_eval(args):
    from .evaluation import evaluate_checkpoint, write_report, format_comparison

    reports, records = evaluate_checkpoint(
        args.checkpoint, args.data, split=args.split, seed=args.seed,
        masks=args.masks, limit=args.limit)
    path = write_report(reports, records, args.data, args.report, figures=not args.no_figures)
    print(format_comparison(reports), end="")
    print(f"report: {path} (wall {reports[0].wall_time:.1f}s)" if reports else "no samples")
    return 0


def _cmd_compare(args):
    from .evaluation import CompareConfig, compare_schemes, format_comparison

    cfg = CompareConfig.from_json(Path(args.config).read_text())
    schemes = args.schemes.split(",")
    reports = compare_schemes(cfg, schemes)
    print(format_comparison(reports), end="")
    print(f"comparison written to {cfg.out_dir}")
    return 0


def _cmd_gradcheck(args):
    from .autodiff import primitive_gradient_checks
    from .losses import loss_gradient_checks

    worst = 0.0
    for name, err in sorted({**primitive_gradient_checks(seeds=args.seeds),
                             **loss_gradient_checks(seeds=args.seeds)}.items()):
        flag = "ok" if err < 1e-4 else "FAIL"
        print(f"{name:<22} {err:.3e}  {flag}")
        worst = max(worst, err)
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < 1e-4 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinyloc", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--mix", default="1.0,0.0,0.0",
                   help="grounding,caption,vqa ratios (sum to 1)")
    g.add_argument("--out", required=True)
    g.add_argument("--split-fracs", default="0.8,0.1,0.1")
    g.add_argument("--query-weights", default=None,
                   help="attribute,largest,relation template weights")
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", required=True, help="TrainConfig JSON file")
    t.add_argument("--stage", type=int, choices=(1, 2, 3))
    t.add_argument("--out", help="override output directory")
    t.add_argument("--resume", action="store_true",
                   help="resume from the output directory checkpoint")
    t.add_argument("--init-from", help="initialize from an existing checkpoint")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report", required=True, help="output directory")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--masks", action="store_true", help="also score decoded masks")
    e.add_argument("--limit", type=int)
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(fn=_cmd_eval)

    c = sub.add_parser("compare", help="compare schemes under a matched budget")
    c.add_argument("--config", required=True, help="CompareConfig JSON file")
    c.add_argument("--schemes", required=True, help="comma-separated scheme list")
    c.set_defaults(fn=_cmd_compare)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seeds", type=int, default=32)
    gc.set_defaults(fn=_cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # one machine-readable error line
        print("ERROR " + json.dumps({"type": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
