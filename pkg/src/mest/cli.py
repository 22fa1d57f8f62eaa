"""Command-line entry points.

Subcommands: train, footprint, bench, forgetting-report, flops,
inspect-checkpoint.  Exit codes: 0 on success, 1 on runtime or feasibility
errors, 2 on usage errors (argparse default).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import kernels, trainer
from .errors import MestError
from .forgetting import ForgettingLog, REMOVE_NOTHING
from .sparsity import LayerGeom, MODES, Scheme, footprint_bits


def _parse_shape(text):
    return tuple(int(t) for t in text.lower().split("x"))


def _add_train(sub):
    p = sub.add_parser("train", help="run a training job from a JSON config")
    p.add_argument("--config", required=True, help="path to a JSON run config")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--seed", type=int, help="override the seed")
    p.add_argument("--epochs", type=int, help="override the epoch count")
    p.add_argument("--resume", help="checkpoint file to resume from")


def cmd_train(args):
    cfg = trainer.RunConfig.from_json(args.config)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    result = trainer.run(cfg, resume_from=args.resume)
    last = result.metrics[-1] if result.metrics else {}
    print(f"done: {cfg.epochs} epochs, test_acc={result.final_test_acc:.4f}, "
          f"nnz={last.get('nnz_total', 0)}, artifacts in {cfg.out_dir}")
    return 0


def _add_footprint(sub):
    p = sub.add_parser("footprint", help="memory footprint of a layer stack")
    p.add_argument("--layers", required=True,
                   help="comma-separated shapes, e.g. 64x64x3x3,10x256")
    p.add_argument("--mode", default="unstructured", choices=MODES)
    p.add_argument("--sparsity", type=float, default=0.9)
    p.add_argument("--b-w", type=int, default=32)
    p.add_argument("--b-index", type=int, default=8)
    p.add_argument("--block", default="4x1", help="block dims m x n")
    p.add_argument("--approx", action="store_true",
                   help="drop row-pointer terms and granularity rounding")
    p.add_argument("--json", action="store_true", help="emit JSON instead of text")


def cmd_footprint(args):
    geoms = [LayerGeom.of(_parse_shape(t)) for t in args.layers.split(",")]
    m, n = _parse_shape(args.block)
    report = footprint_bits(geoms, args.mode, s=args.sparsity,
                            b_w=args.b_w, b_index=args.b_index,
                            scheme=Scheme("block", m, n), exact=not args.approx)
    if args.json:
        print(json.dumps({
            "mode": report.mode, "sparsity": report.s,
            "weight_bits": report.weight_bits, "grad_bits": report.grad_bits,
            "index_bits": report.index_bits, "total_bits": report.total_bits,
            "per_layer": report.per_layer,
        }, indent=2))
    else:
        print(f"mode={report.mode} s={report.s} b_w={report.b_w} "
              f"b_index={report.b_index}")
        for i, row in enumerate(report.per_layer):
            print(f"  layer {i}: N={row['n']} weight={row['weight_bits']:.0f} "
                  f"grad={row['grad_bits']:.0f} index={row['index_bits']:.0f}")
        print(f"total: {report.total_bits:.0f} bits "
              f"({report.total_bits / 8 / 1024:.2f} KiB)")
    return 0


def _add_bench(sub):
    p = sub.add_parser("bench", help="kernel microbenchmark against the dense baseline")
    p.add_argument("--shape", default="64x64x3x3")
    p.add_argument("--schemes", default="unstructured,channel,block,pattern")
    p.add_argument("--sparsities", default="0.5,0.6,0.7,0.8,0.9,0.95")
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--fmap", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dense-control", action="store_true",
                   help="re-time the dense kernel as a sanity control")
    p.add_argument("--csv", help="write the acceleration table to this CSV")
    p.add_argument("--gnuplot", help="write gnuplot-ready blocks to this path")


def cmd_bench(args):
    report = kernels.bench(
        shape=_parse_shape(args.shape),
        schemes=[s.strip() for s in args.schemes.split(",") if s.strip()],
        sparsity_grid=[float(s) for s in args.sparsities.split(",")],
        repeats=args.repeats, fmap=args.fmap, seed=args.seed,
        include_dense_control=args.dense_control)
    print(f"machine: {report.machine}")
    print(f"dense fwd={report.dense_fwd_us:.1f}us bwd={report.dense_bwd_us:.1f}us")
    for p in report.points:
        print(f"  {p.scheme:14s} s={p.sparsity:<5g} fwd={p.fwd_us:8.1f}us "
              f"bwd={p.bwd_us:8.1f}us accel={p.accel:.3f}x")
    if args.csv:
        report.to_csv(args.csv)
    if args.gnuplot:
        report.to_gnuplot(args.gnuplot)
    return 0


def _add_forgetting(sub):
    p = sub.add_parser("forgetting-report",
                       help="per-example forgetting statistics for a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--th", type=int, default=REMOVE_NOTHING,
                   help="removal threshold to preview (-1 removes nothing)")
    p.add_argument("--csv", help="write the per-example table to this CSV")


def cmd_forgetting(args):
    ckpts = sorted(f for f in os.listdir(args.run_dir)
                   if f.startswith("checkpoint_") and f.endswith(".mest"))
    if not ckpts:
        raise MestError(f"no checkpoints in {args.run_dir}")
    cfg = trainer.RunConfig.from_json(os.path.join(args.run_dir, "config.json"))
    train_ds, _ = trainer.load_dataset(cfg)
    net = trainer.build_model(cfg.model, train_ds.images.shape[1:],
                              max(2, train_ds.num_classes), cfg.np_dtype)
    states = trainer.wire_sparsity(cfg, net)
    tail = trainer.load_checkpoint(os.path.join(args.run_dir, ckpts[-1]),
                                   cfg, states)
    log = ForgettingLog.from_state(tail["forgetting"])
    unforgettable = log.unforgettable_set()
    removal = log.removal_set(args.th)
    print(f"examples={log.num_examples} epochs_observed={log.epochs_observed}")
    print(f"ever_correct={int(log.ever_correct.sum())} "
          f"unforgettable={len(unforgettable)}")
    print(f"removal preview (th={args.th}): {len(removal)} examples "
          f"({len(removal) / max(1, log.num_examples):.1%})")
    if args.csv:
        from .forgetting import write_report_csv
        write_report_csv(log, args.csv, removed=removal)
    return 0


def _add_flops(sub):
    p = sub.add_parser("flops", help="FLOP accounting for a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--json", action="store_true")


def cmd_flops(args):
    cfg = trainer.RunConfig.from_json(args.config)
    report = trainer.flops_report(cfg)
    if args.json:
        print(json.dumps(report, indent=2))
        return 0
    for row in report["per_layer"]:
        print(f"  layer {row['index']}: dense_macs={row['dense_macs']} "
              f"density={row['density']:.4f} sparse_macs={row['sparse_macs']:.0f}")
    print(f"inference: {report['inference_flops']:.3e} FLOPs")
    print(f"training ({report['epochs']} epochs): "
          f"{report['training_flops']:.3e} FLOPs")
    return 0


def _add_inspect(sub):
    p = sub.add_parser("inspect-checkpoint", help="show checkpoint header info")
    p.add_argument("path")


def cmd_inspect(args):
    print(json.dumps(trainer.inspect_checkpoint(args.path), indent=2))
    return 0


_COMMANDS = {
    "train": cmd_train,
    "footprint": cmd_footprint,
    "bench": cmd_bench,
    "forgetting-report": cmd_forgetting,
    "flops": cmd_flops,
    "inspect-checkpoint": cmd_inspect,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mest",
        description="memory-economic sparse training toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)
    _add_footprint(sub)
    _add_bench(sub)
    _add_forgetting(sub)
    _add_flops(sub)
    _add_inspect(sub)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (MestError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
