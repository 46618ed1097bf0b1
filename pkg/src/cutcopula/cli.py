"""Command-line entry point.

Examples
--------
    cutcopula sim1 --n 100 --reps 1 --seed 7
    cutcopula sim2 --reps 100 --seed 1 --threads 4 --out results/sim2
    cutcopula fit experiment.toml --reps 10
    cutcopula metrics results/sim1
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from typing import Sequence

from cutcopula import harness
from cutcopula.harness import ConfigError, ExperimentAborted

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _add_run_flags(p: argparse.ArgumentParser):
    p.add_argument("--n", type=int, help="observations per dataset")
    p.add_argument("--reps", type=int, help="number of replicate datasets")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--methods", help="comma-separated subset of " + ",".join(harness.METHODS))
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="parallel worker processes for replicates")
    p.add_argument("--steps", type=int, help="VI optimizer steps per stage")
    p.add_argument("--draws", type=int, help="retained MCMC draws")
    p.add_argument("--burn-in", type=int, dest="burn_in", help="MCMC burn-in")
    p.add_argument("--inner-burn-in", type=int, dest="inner_burn_in",
                   help="inner-chain length of the nested sampler")
    p.add_argument("--save-draws", action="store_true", default=None, dest="save_draws",
                   help="also write constrained draws for the metrics subcommand")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cutcopula",
        description="Cut-posterior simulation studies for parametric copula models.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("sim1", "misspecified copula, correct margins (type-1 cut)"),
                       ("sim2", "misspecified margins, correct copula (type-2 cut)")):
        _add_run_flags(sub.add_parser(name, help=text))
    fit = sub.add_parser("fit", help="run an experiment described by a TOML config")
    fit.add_argument("config", help="TOML config or a manifest.json from an earlier run")
    _add_run_flags(fit)
    met = sub.add_parser("metrics", help="recompute metrics from saved draws")
    met.add_argument("draws_dir", help="run directory (or its draws/ subdirectory)")
    return parser


def _apply_overrides(cfg: harness.ExperimentConfig, args) -> harness.ExperimentConfig:
    upd = {}
    if args.n is not None:
        upd["n"] = args.n
    if args.reps is not None:
        upd["S"] = args.reps
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.methods:
        upd["methods"] = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    if args.out is not None:
        upd["out"] = args.out
    if args.threads is not None:
        upd["threads"] = args.threads
    if args.save_draws:
        upd["save_draws"] = True
    if args.steps is not None:
        upd["vi"] = replace(cfg.vi, steps=args.steps)
    mc = {}
    if args.draws is not None:
        mc["n_draws"] = args.draws
    if args.burn_in is not None:
        mc["burn_in"] = args.burn_in
    if args.inner_burn_in is not None:
        mc["inner_burn_in"] = args.inner_burn_in
    if mc:
        upd["mcmc"] = replace(cfg.mcmc, **mc)
    cfg = replace(cfg, **upd) if upd else cfg
    if cfg.out is None:
        cfg = replace(cfg, out=f"results/{cfg.experiment}")
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on unknown flags or subcommands
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "metrics":
            res = harness.metrics_from_draws(args.draws_dir)
            print(harness.summary_table(res["rows"]))
            print(f"\nwrote {res['path']}")
            return EXIT_OK
        if args.command == "fit":
            cfg = harness.load_config(args.config)
        elif args.command == "sim1":
            cfg = harness.sim1_config()
        else:
            cfg = harness.sim2_config()
        cfg = _apply_overrides(cfg, args)
        res = harness.run_experiment(cfg, progress=args.verbose)
    except FileNotFoundError as exc:
        print(f"cutcopula: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ValueError) as exc:
        print(f"cutcopula: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ExperimentAborted as exc:
        print(f"cutcopula: run aborted: {exc}", file=sys.stderr)
        return EXIT_FAILED
    print(harness.summary_table(res["rows"]))
    print(f"\nwrote {res['paths']['csv']}")
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
