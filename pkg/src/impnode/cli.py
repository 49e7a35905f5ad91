"""Command-line entry point: ``impnode run | metrics | plotdata``."""
from __future__ import annotations

import argparse
import logging
import sys

from .experiment import ConfigError, compute_metrics, emit_plotdata, load_config, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="impnode", description="Learn ODE vector fields from noisy time series.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a YAML config or preset name")
    run.add_argument("config")
    run.add_argument("--fast", action="store_true", help="short epoch counts for quick checks")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    met = sub.add_parser("metrics", help="recompute field errors from a run directory")
    met.add_argument("run_dir")

    plot = sub.add_parser("plotdata", help="write plot-ready CSVs for a run directory")
    plot.add_argument("run_dir")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        try:
            cfg = load_config(args.config, seed=args.seed, fast=args.fast or None)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        run_dir, ok = run_experiment(cfg, args.out, jobs=args.jobs)
        print(run_dir)
        if not ok:
            print(f"one or more stages failed; see {run_dir / 'manifest.json'}", file=sys.stderr)
            return EXIT_TRAINING
        return EXIT_OK
    try:
        if args.command == "metrics":
            for rep in compute_metrics(args.run_dir):
                print(f"{rep.method}\tnoise={rep.noise:g}\tmean={rep.mean:.6g}\tmedian={rep.median:.6g}")
        else:
            for name, path in emit_plotdata(args.run_dir).items():
                print(f"{name}\t{path}")
    except (FileNotFoundError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
