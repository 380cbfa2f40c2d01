"""Command-line entry point: ``poerank <command> [config.json] [flags]``.

Exit codes: 0 on success, 1 on invalid input, 2 when an optimisation fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConvergenceError, InvalidInputError, LogParseError, SingularityError
from .experiment import (
    COMMANDS,
    ExperimentConfig,
    run_calibrate,
    run_rank,
    run_report,
    run_select,
    run_simulate,
)

logger = logging.getLogger("poerank")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_parser():
    parser = argparse.ArgumentParser(prog="poerank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name == "report":
            p.add_argument("output_dir", nargs="?", default="runs")
            continue
        p.add_argument("config", nargs="?", help="JSON config file")
        p.add_argument("--seed", type=int, action="append", dest="seeds",
                       help="seed to run; repeat for a sweep")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--output-dir")
        p.add_argument("--comparisons", help="comparison log (JSON lines)")
        p.add_argument("--absolutes", help="absolute assessment log (JSON lines)")
        p.add_argument("--truth", help="latent score file (JSON lines)")
        p.add_argument("--budget", type=int)
        p.add_argument("--policy", action="append", dest="policies",
                       help="random, min_uncertainty, variance, reorder or power:<eps>")
        p.add_argument("--batch-size", type=int)
        p.add_argument("--debiasing", choices=("none", "permutation", "home_advantage"))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key, e.g. judge.noise_sd=0.5")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.from_dict({})
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise InvalidInputError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = _parse_value(value)
    flags = {
        "seeds": args.seeds,
        "output_dir": args.output_dir,
        "comparison_log": args.comparisons,
        "absolute_log": args.absolutes,
        "truth_log": args.truth,
        "budget": args.budget,
        "policies": args.policies,
        "batch_size": args.batch_size,
        "debiasing": args.debiasing,
    }
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return cfg.override(overrides) if overrides else cfg


def run(args):
    if args.command == "report":
        print(run_report(args.output_dir))
        return 0
    cfg = config_from_args(args)
    if args.command == "simulate":
        for path in run_simulate(cfg):
            print(path)
    elif args.command == "rank":
        run_rank(cfg, jobs=args.jobs)
        print(cfg.run_dir("rank"))
    elif args.command == "select":
        summary, _ = run_select(cfg, jobs=args.jobs)
        for name, s in summary.items():
            print(f"{name:<16} efficiency {s['mean_efficiency']} "
                  f"not reached {s['not_reached']}/{s['n']}")
        print(cfg.run_dir("select"))
    elif args.command == "calibrate":
        s = run_calibrate(cfg, jobs=args.jobs)
        print(f"ece {s['ece_before']:.4f} -> {s['ece_after']:.4f} at T={s['optimal_temperature']:.4f}")
        print(cfg.run_dir("calibrate"))
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (ConvergenceError, SingularityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InvalidInputError, LogParseError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
