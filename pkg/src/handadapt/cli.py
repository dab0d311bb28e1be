"""Command-line entry point: ``handadapt <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from . import gradcheck as gc
from . import pipeline as pl
from .trainer import METHODS, TrainingDiverged

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2, which is reserved here
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="handadapt", description="Synthetic hand data, source training, adaptation and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="materialise source/target datasets")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="output directory (default: dataset.data_dir or <output_dir>/data)")

    t = sub.add_parser("train-source", help="supervised training on the source domain")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="directory for model.ckpt and log.csv")

    a = sub.add_parser("adapt", help="adapt a source checkpoint to the target domain")
    a.add_argument("--config", required=True)
    a.add_argument("--method", required=True, choices=METHODS)
    a.add_argument("--init", required=True, help="source checkpoint")
    a.add_argument("--out", help="directory for student/teacher checkpoints and log.csv")

    e = sub.add_parser("eval", help="metrics.json and per-instance CSV for one or more checkpoints")
    e.add_argument("--config", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", nargs="+", help="one checkpoint, or several to ensemble")
    src.add_argument("--pred", help=".npz of stored predictions (keypoints, mask_prob) to score instead")
    e.add_argument("--split", choices=("val", "test"), default="val")
    e.add_argument("--domain", choices=("source", "target"), default="target")
    e.add_argument("--out")

    z = sub.add_parser("analyze", help="disagreement correlation and bone-length densities")
    z.add_argument("--config", required=True)
    z.add_argument("--ckpts", required=True, nargs=2, metavar=("T1", "T2"))
    z.add_argument("--baseline", help="optional unadapted checkpoint for the density comparison")
    z.add_argument("--split", choices=("val", "test"), default="val")
    z.add_argument("--out")

    sub.add_parser("gradcheck", help="finite-difference check of every primitive and the network loss")
    return p


def _cmd(args) -> int:
    if args.command == "gradcheck":
        rep = gc.run_suite()
        for r in rep.results:
            status = "ok" if r.max_rel_error < gc.THRESHOLD and r.n_checked else "FAIL"
            print(f"{status:4s} {r.name:16s} max_rel_err={r.max_rel_error:.3e} checked={r.n_checked} "
                  f"skipped={r.n_skipped}")
        print(f"{'passed' if rep.passed else 'FAILED'} in {rep.seconds:.1f}s")
        return EXIT_OK if rep.passed else EXIT_NUMERIC

    cfg = pl.load_config(args.config)
    if args.command == "gen-data":
        print(pl.gen_data(cfg, args.out))
    elif args.command == "train-source":
        _, ckpt = pl.run_train_source(cfg, args.out)
        print(ckpt)
    elif args.command == "adapt":
        res = pl.run_adapt(cfg, args.method, pl.load_net(args.init), args.out)
        last = res.logs[-1] if res.logs else {}
        print(json.dumps({k: v for k, v in last.items() if isinstance(v, (int, float))}, sort_keys=True))
    elif args.command == "eval":
        if args.pred:
            rec = pl.run_eval_predictions(cfg, args.pred, args.split, args.domain, args.out)
        else:
            rec = pl.run_eval(cfg, [pl.load_net(c) for c in args.ckpt], args.split, args.domain, args.out)
        print(json.dumps(rec.summary(), sort_keys=True))
    elif args.command == "analyze":
        base = pl.load_net(args.baseline) if args.baseline else None
        res = pl.run_analyze(cfg, [pl.load_net(c) for c in args.ckpts], base, args.out, args.split)
        print(json.dumps({"spearman_rho": res.correlation.spearman_rho, "kde_l1": res.kde_l1}, sort_keys=True))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _cmd(args)
    except (TrainingDiverged, ad.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
