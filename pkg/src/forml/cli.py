"""Command line entry point: ``forml run|condense|report``."""
from __future__ import annotations

import argparse
import logging
import sys

from .experiment import ExperimentConfig, failed, report, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forml", description="Fairness reweighting experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every (method, seed) pair of an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--seeds", type=int, help="override num_seeds")
    run.add_argument("--out", help="override out_dir")
    run.add_argument("--workers", type=int, help="parallel runs")

    cond = sub.add_parser("condense", help="run the condensation pipeline")
    cond.add_argument("--config", required=True)
    cond.add_argument("--seeds", type=int)
    cond.add_argument("--out")
    cond.add_argument("--workers", type=int)

    rep = sub.add_parser("report", help="re-aggregate rows.csv into summary.csv")
    rep.add_argument("--in", dest="in_dir", required=True)
    return parser


def _print_summary(summary):
    for s in summary:
        print(f"{s['method']:>16} {s['metric']:>15} {s['mean']:.6f} +- {s['stderr']:.6f} (n={s['runs']})")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.command == "report":
        _print_summary(report(args.in_dir))
        return 0
    cfg = ExperimentConfig.from_json(args.config, num_seeds=args.seeds, out_dir=args.out, workers=args.workers)
    if args.command == "condense" and cfg.experiment != "condensation":
        print(f"config describes a {cfg.experiment!r} experiment, not condensation", file=sys.stderr)
        return 2
    rows, summary = run_experiment(cfg, args.out)
    _print_summary(summary)
    if failed(rows):
        print("some runs failed; see rows.csv", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
