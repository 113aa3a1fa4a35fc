"""Command line entry point: ``talkdistill <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 5 contract violation (shape mismatch, unfrozen teacher, ...).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, config as config_mod, experiment
from .errors import ConfigError, TalkDistillError

log = logging.getLogger("talkdistill")


def _common(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
    p.add_argument("--out", help="output directory (overrides run.out)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="talkdistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the teacher on the pre-training task")
    _common(p)

    p = sub.add_parser("distill", help="distil a teacher checkpoint into a student")
    _common(p)
    p.add_argument("--teacher", help="teacher checkpoint (not needed for method=scratch)")

    p = sub.add_parser("sweep", help="run a grid of distill runs over seeds")
    _common(p)
    p.add_argument("--teacher", help="reuse this teacher instead of pretraining one per data setting")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("analyze", help="CKA similarity grids for a trained student")
    _common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True, help="student checkpoint from a TD/FD/Hybrid run")

    p = sub.add_parser("gen-data", help="write task splits as tab-separated text")
    _common(p)
    return parser


def resolve_config(args):
    overrides = dict(config_mod.parse_override(o) for o in args.overrides)
    if args.seed is not None:
        overrides["run.seed"] = args.seed
    if args.out is not None:
        overrides["run.out"] = args.out
    return config_mod.load(args.config, overrides)


def run(args):
    cfg = resolve_config(args)
    out = Path(cfg["run.out"])
    if args.command == "pretrain":
        result = experiment.run_pretrain(cfg, out, force=args.force)
    elif args.command == "distill":
        if args.teacher is None and cfg["train.method"] != "scratch":
            raise ConfigError(f"--teacher is required for method {cfg['train.method']}")
        result = experiment.run_distill(cfg, args.teacher, out, force=args.force)
    elif args.command == "sweep":
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        rows = experiment.run_sweep(cfg, out, teacher_ckpt=args.teacher, jobs=args.jobs,
                                    force=args.force)
        result = {"cells": len(rows), "results": str(out / "results.csv")}
    elif args.command == "analyze":
        grids = experiment.run_analyze(cfg, args.teacher, args.student, out, force=args.force)
        result = {"buckets": [str(g.bucket) for g in grids], "out": str(out)}
    else:
        result = {"files": experiment.run_gen_data(cfg, out, force=args.force)}
    print(json.dumps(result, indent=2, default=str))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except TalkDistillError as exc:
        print(f"talkdistill {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
