"""Command line entry point: ``wipelab <command> [options]``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness, netcore, sim, taskctl, ttnpb

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("wipelab")


def _u64(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config")
    common.add_argument("--seed", type=_u64, help="experiment seed (overrides the config)")
    common.add_argument("--out", default="run", help="output directory (default: ./run)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="wipelab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    sub.add_parser("collect", parents=[common], help="run proportional control with random targets, write episodes")

    p = sub.add_parser("train", parents=[common], help="fit the forward model and PBs")
    p.add_argument("--episodes", nargs="*", help="episode files (default: <out>/episodes/*.jsonl)")

    p = sub.add_parser("recognize", parents=[common], help="online PB recognition on one or more materials")
    p.add_argument("--checkpoint", help="default: <out>/checkpoint.bin")
    p.add_argument("--material", action="append", help="repeatable; default: every configured material")
    p.add_argument("--steps", type=int)
    p.add_argument("--start", help='"farthest", "mean" or a material name')

    p = sub.add_parser("control", parents=[common], help="closed-loop wiping with the model-based controller")
    p.add_argument("--checkpoint", help="default: <out>/checkpoint.bin")
    p.add_argument("--material")
    p.add_argument("--loss", choices=list(taskctl.LOSS_KINDS), default=taskctl.TRACK)
    p.add_argument("--pb", default="correct", help="correct | wrong:<name> | basic")
    p.add_argument("--run-seed", type=int, default=0, help="per-run seed index")
    p.add_argument("--steps", type=int)

    sub.add_parser("eval", parents=[common], help="gather control run records under --out into metrics.csv")

    p = sub.add_parser("pca", parents=[common], help="project the trained PBs onto their principal axes")
    p.add_argument("--checkpoint", help="default: <out>/checkpoint.bin")
    return ap


def _ckpt(args):
    return Path(args.checkpoint) if args.checkpoint else Path(args.out) / "checkpoint.bin"


def run(args):
    cfg = harness.load_config(args.config, seed=args.seed)
    out = Path(args.out)
    if args.command == "collect":
        paths = harness.cmd_collect(cfg, out)
        print(f"wrote {len(paths)} episodes to {out / 'episodes'}")
    elif args.command == "train":
        paths = args.episodes if args.episodes else sorted((out / "episodes").glob("*.jsonl"))

        def progress(epoch, mse):
            log.info("epoch %d  mse %.6f", epoch, mse)

        res = harness.cmd_train(cfg, paths, out, progress)
        print(f"mse {res.initial_mse:.6f} -> {res.final_mse:.6f} after {len(res.curve)} epochs")
    elif args.command == "recognize":
        for name in args.material or cfg.recognize.materials:
            res = harness.cmd_recognize(cfg, _ckpt(args), name, out, args.steps, args.start)
            final = res.nearest[-1] if res.nearest else "-"
            print(f"{name}: {len(res.trajectory)} updates, nearest {final}")
    elif args.command == "control":
        run_ = harness.cmd_control(cfg, _ckpt(args), out, args.material, args.loss, args.pb,
                                   args.steps, args.run_seed)
        if run_.metrics is not None:
            print(f"E_ave {taskctl.metric_for(args.loss, run_.metrics):.6g} over {len(run_.frames)} ticks")
        if run_.nonfinite_ticks:
            print(f"{len(run_.nonfinite_ticks)} ticks fell back to the previous plan", file=sys.stderr)
    elif args.command == "eval":
        path, rows = harness.cmd_eval(out)
        print(f"{len(rows)} runs -> {path}")
    elif args.command == "pca":
        pca = harness.cmd_pca(_ckpt(args), out)
        print("explained variance", " ".join(f"{v:.4g}" for v in pca.variances))
    return EXIT_OK


DATA_ERRORS = (ttnpb.InsufficientData, ttnpb.EpisodeParseError, ttnpb.BufferTooSmall,
               ttnpb.DegenerateData, netcore.CheckpointError, OSError)
NUMERIC_ERRORS = (sim.NonFiniteCommand, taskctl.NonFiniteLoss, ArithmeticError, netcore.DimensionMismatch)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
