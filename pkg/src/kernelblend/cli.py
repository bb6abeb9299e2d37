"""Command-line entry points.

Every subcommand writes machine-readable output under the experiment's
output directory and a short human summary to stdout. Exit code 0 on
success; any failure prints a one-line reason to stderr and returns 1
(argparse itself rejects unknown flags with code 2).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import checkpoint as ck
from . import cost as co
from . import disturbance as di
from . import experiment as ex
from .config import ConfigError, load_config, parse_config
from .data import DatasetError


def _load_from_checkpoint(path):
    state, raw_config = ck.load_checkpoint(path)
    if raw_config is None:
        raise ck.CheckpointError(
            f"checkpoint {path} carries no experiment config; re-save it through `train`")
    cfg = parse_config(raw_config)
    return state, cfg


def cmd_train(args) -> int:
    cfg = load_config(args.config)

    def log(row):
        print(f"step {row['step']}: loss {row['train_loss']:.4f} "
              f"acc_lm {row['eval_acc_lm']:.3f} acc_full {row['eval_acc_full']:.3f} "
              f"eps {row['epsilon']:.3f}")

    summary = ex.run_train(cfg, log=log)
    print(f"trained {summary['steps']} steps; checkpoint at {summary['checkpoint']}")
    print(f"metrics: {summary['metrics_csv']}")
    return 0


def cmd_eval(args) -> int:
    state, cfg = _load_from_checkpoint(args.ckpt)
    _, evalset = ex.load_dataset(cfg)
    threshold = args.threshold if args.threshold is not None else cfg.default_threshold
    acc = ex.pipeline_accuracy(state, evalset, threshold)
    rate = ex.skip_rate(state, evalset, threshold)
    result = {
        "threshold": threshold,
        "accuracy": acc,
        "skip_rate": rate,
        "accuracy_lm": ex.lm_accuracy(state, evalset),
        "accuracy_full": ex.full_accuracy(state, evalset),
    }
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / "eval.json"
    out.write_text(json.dumps(result, indent=1))
    print(f"threshold {threshold}: accuracy {acc:.4f}, skip rate {rate:.4f} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    state, cfg = _load_from_checkpoint(args.ckpt)
    _, evalset = ex.load_dataset(cfg)
    thresholds = [float(t) for t in args.thresholds.split(",") if t != ""]
    if not thresholds:
        raise ValueError("no thresholds given")
    points = co.sweep(state.lm, state.lm_params, state.bank, state.synth_cfg,
                      evalset, thresholds)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / "sweep.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "skip_rate", "avg_madds", "accuracy"])
        for p in points:
            writer.writerow([repr(p.threshold), repr(p.skip_rate),
                             repr(p.avg_madds), repr(p.accuracy)])
    for p in points:
        print(f"threshold {p.threshold:g}: skip {p.skip_rate:.3f}, "
              f"avg madds {p.avg_madds:.1f}, accuracy {p.accuracy:.4f}")
    print(f"-> {out}")
    return 0


def cmd_disturb(args) -> int:
    state, cfg = _load_from_checkpoint(args.ckpt)
    _, evalset = ex.load_dataset(cfg)
    model = (state.lm, state.lm_params, state.bank, state.synth_cfg)

    mean_table = None
    if args.kind == "mean":
        mean_table = di.mean_coefficients(*model, evalset)

    reference = di.evaluate_disturbed(*model, evalset, di.Disturbance("correct"))
    rows = [("correct", reference, 0.0)]

    if args.layer == "all":
        sweep_rows = di.layer_sweep(*model, evalset, kind=args.kind, seeds=args.seeds)
        for row in sweep_rows:
            rows.append((f"L{row['layer']}", row["accuracy_mean"],
                         row["accuracy_mean"] - reference))
    else:
        layer = int(args.layer) if args.layer is not None else None
        accs = [
            di.evaluate_disturbed(*model, evalset,
                                  di.Disturbance(args.kind, layer=layer, seed=s),
                                  mean_table=mean_table)
            for s in range(args.seeds)
        ]
        label = args.kind if layer is None else f"{args.kind}@L{layer}"
        rows.append((label, float(np.mean(accs)), float(np.mean(accs)) - reference))

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / "disturbance.csv"
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind_or_layer", "accuracy", "delta_vs_correct"])
        for name, acc, delta in rows:
            writer.writerow([name, repr(acc), repr(delta)])
    for name, acc, delta in rows:
        print(f"{name}: accuracy {acc:.4f} ({delta:+.4f})")
    print(f"-> {out}")
    return 0


def cmd_cost(args) -> int:
    cfg = load_config(args.config)
    state, _ = ex.build_state(cfg)
    report = co.full_cost(state.lm, state.bank)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / "cost.json"
    out.write_text(json.dumps(report.to_dict(), indent=1))
    print(json.dumps(report.to_dict(), indent=1))
    return 0


def cmd_export_coeffs(args) -> int:
    state, cfg = _load_from_checkpoint(args.ckpt)
    _, evalset = ex.load_dataset(cfg)
    count = ex.export_coefficients(state, evalset, args.out)
    print(f"wrote {count} coefficient rows for {len(evalset)} images -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernelblend",
        description="Two-stage dynamic-convolution experiments: train, evaluate, "
                    "sweep termination thresholds, disturb coefficients, price configs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint at one threshold")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy/cost across termination thresholds")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--thresholds", required=True, help="comma-separated list")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("disturb", help="corrupt coefficients and measure accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kind", required=True, choices=list(di.KINDS))
    p.add_argument("--layer", default=None, help="layer index, or 'all' for a per-layer sweep")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(fn=cmd_disturb)

    p = sub.add_parser("cost", help="print the itemized cost report for a config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("export-coeffs", help="dump per-image coefficients to CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_coeffs)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, DatasetError, ck.CheckpointError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
