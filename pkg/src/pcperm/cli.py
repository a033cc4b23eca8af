"""Command-line entry point: ``pcperm <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (LBM instability, diverged training).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _n_points(text):
    if text in ("min", "max"):
        return text
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, 'min' or 'max', got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("n_points must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pcperm", description="Synthetic porous media, LBM permeability, and a PointNet regressor.")
    p.add_argument("--config", help="pipeline config (JSON); defaults are used for missing keys")
    p.add_argument("--seed", type=int, help="override every seed in the config")
    p.add_argument("--threads", type=int, default=1, help="worker processes for generate; BLAS threads")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS so repeated runs are bit-identical")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate media, run LBM, extract clouds, write a manifest")
    g.add_argument("--out", required=True, help="dataset directory")
    g.add_argument("--count", type=int, help="number of samples (default: config count)")

    s = sub.add_parser("stats", help="porosity/permeability statistics, mean (std)")
    s.add_argument("data", help="dataset directory")
    s.add_argument("--json", action="store_true", help="print JSON instead of text")

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--n-points", type=_n_points)

    e = sub.add_parser("eval", help="evaluate a trained run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    e.add_argument("--checkpoint", default="best", choices=("best", "last"))
    e.add_argument("--n-points", type=int, help="must match the checkpoint")
    e.add_argument("--out", help="report directory (default: RUN/eval_SPLIT)")

    pr = sub.add_parser("predict", help="predict k for voxel-grid files")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("grids", nargs="+")

    gs = sub.add_parser("gridsearch", help="train over a grid of learning rates and batch sizes")
    gs.add_argument("--data", required=True)
    gs.add_argument("--out", required=True)
    gs.add_argument("--lr", type=float, nargs="+", required=True)
    gs.add_argument("--batch-size", type=int, nargs="+", required=True)
    gs.add_argument("--epochs", type=int)
    return p


def _load_config(args):
    from dataclasses import replace

    from .harness import PipelineConfig

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    train = cfg.train
    if getattr(args, "epochs", None) is not None:
        train = replace(train, max_epochs=args.epochs)
    if getattr(args, "lr", None) is not None and args.command == "train":
        train = replace(train, lr0=args.lr)
    if getattr(args, "batch_size", None) is not None and args.command == "train":
        train = replace(train, batch_size=args.batch_size)
    cfg = replace(cfg, train=train)
    if getattr(args, "n_points", None) is not None and args.command == "train":
        cfg = replace(cfg, n_points=args.n_points)
    return cfg


def _run(args) -> int:
    from . import harness
    from .checkpoint import Checkpoint

    cfg = _load_config(args)
    if args.command == "generate":
        if args.count is not None and args.count < 1:
            raise UsageError("--count must be >= 1")
        manifest = harness.generate_dataset(
            cfg, args.out, args.count, workers=max(1, args.threads),
            progress=lambda r: logging.info("%s phi=%.4f k=%s mD", r["id"], r["porosity"], r["k_mD"]))
        bad = len(manifest.records) - len(manifest.trainable())
        print(f"{len(manifest.records)} samples in {args.out} ({bad} excluded)")
    elif args.command == "stats":
        manifest = harness.read_manifest(args.data)
        dataset = harness.load_dataset(args.data, manifest)
        split = harness.make_split(cfg, dataset) if len(dataset) >= 3 else None
        stats = harness.dataset_stats(manifest, split)
        print(json.dumps(stats, indent=2) if args.json else harness.format_stats(stats))
    elif args.command == "train":
        result = harness.run_training(
            cfg, args.data, args.out,
            callback=lambda h: logging.info("epoch %d lr %.3g train %.4g val %.4g",
                                            h["epoch"], h["lr"], h["train_loss"], h["val_loss"]))
        best = min(result.history, key=lambda h: h["val_loss"] if h["val_loss"] == h["val_loss"] else h["train_loss"])
        print(f"trained {len(result.history)} epochs; best epoch {best['epoch']} "
              f"(val loss {best['val_loss']:.4g}); run in {args.out}")
    elif args.command == "eval":
        m = harness.run_eval(args.run, args.data, args.split, args.checkpoint, args.n_points, args.out)
        print(f"R2 {m.r2:.5f}  rel.err min {m.min_rel_err:.4g} ({m.min_rel_err_id}) "
              f"max {m.max_rel_err:.4g} ({m.max_rel_err_id})  n={m.n_samples}")
    elif args.command == "predict":
        ck = Checkpoint.load(args.checkpoint)
        for path in args.grids:
            r = harness.predict_grid(ck, path, seed=cfg.train.seed)
            print(f"{path}\tk_mD={r['k_mD']:.6g}\tk_scaled={r['k_scaled']:.6f}")
    elif args.command == "gridsearch":
        if any(lr <= 0 for lr in args.lr) or any(b < 1 for b in args.batch_size):
            raise UsageError("learning rates must be positive and batch sizes >= 1")
        rows = harness.gridsearch(cfg, args.data, args.out, args.lr, args.batch_size)
        for r in rows:
            print(f"{r['run']}\tbest_val_loss={r['best_val_loss']:.5g}\tepochs={r['epochs']}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        print("pcperm: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    # must happen before numpy loads its BLAS
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        if args.deterministic:
            os.environ[var] = "1"
        else:
            os.environ.setdefault(var, str(args.threads))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .harness import ConfigError, DataError
    from .lbm import LBMInstabilityError
    from .mediagen import GenerationError
    from .train import TrainingDivergedError

    try:
        return _run(args)
    except (UsageError, ConfigError) as exc:
        print(f"pcperm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (LBMInstabilityError, TrainingDivergedError, FloatingPointError) as exc:
        print(f"pcperm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, GenerationError, ValueError, KeyError, OSError) as exc:
        detail = f"{exc.strerror}: {exc.filename}" if isinstance(exc, OSError) and exc.filename else exc
        print(f"pcperm: data error: {detail}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
