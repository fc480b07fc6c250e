"""Command-line entry point: one subcommand per pipeline stage."""

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import DEFAULTS, load_config

SUBCOMMANDS = {
    "gen-data": pipeline.run_gen_data,
    "pretrain": pipeline.run_pretrain,
    "train-cls": pipeline.run_train_cls,
    "eval-osr": pipeline.run_eval_osr,
    "eval-closed": pipeline.run_eval_closed,
    "detect": pipeline.run_detect,
    "diagnose": pipeline.run_diagnose,
}


def _mangle(key):
    return "opt__" + key.replace(".", "__")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key=value config file")
    for key in sorted(DEFAULTS):
        common.add_argument(f"--{key}", dest=_mangle(key), default=None, metavar="V",
                            help=f"override {key} (default {DEFAULTS[key]})")
    parser = argparse.ArgumentParser(
        prog="slotosr",
        description="slot-based open-set recognition on synthetic scenes")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common])
    plot = sub.add_parser("plot", parents=[common])
    plot.add_argument("csv", help="schema-tagged CSV to render")
    return parser


def _overrides(args):
    out = {}
    for key in DEFAULTS:
        raw = getattr(args, _mangle(key))
        if raw is not None:
            out[key] = raw
    return out


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        run_dir = pipeline.new_run_dir(cfg, args.subcommand)
        if args.subcommand == "plot":
            from .plotting import render_csv
            out = run_dir / (Path(args.csv).stem + ".svg")
            render_csv(args.csv, out)
            result = {"svg": str(out)}
        else:
            result = SUBCOMMANDS[args.subcommand](cfg, run_dir)
    except Exception as exc:  # surface one named diagnostic line, fail nonzero
        print(f"slotosr {args.subcommand}: error: {exc}", file=sys.stderr)
        return 1
    print(f"run dir: {run_dir}")
    for key, value in result.items():
        print(f"  {key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
