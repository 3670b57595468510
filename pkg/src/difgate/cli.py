"""Command-line entry point: ``difgate analyze`` and ``difgate simulate``."""

import argparse
import logging
import sys

from . import __version__
from .analysis import AnalysisSettings, analyze_dataset
from .errors import ConfigError, DifgateError
from .io import ingest_csv, load_config, write_report, write_simulation
from .simulation import SimulationConfig, run_study

EXIT_OK, EXIT_ERROR, EXIT_DEGENERATE = 0, 1, 2


def _parser():
    parser = argparse.ArgumentParser(prog="difgate", description=__doc__)
    parser.add_argument("--version", action="version", version=f"difgate {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="fit one wide-format CSV and run the Delta test")
    a.add_argument("path")
    a.add_argument("--alpha", type=float, default=0.05)
    a.add_argument("--quad-nodes", type=int, default=61)
    a.add_argument("--em-tol", type=float, default=1e-5)
    a.add_argument("--em-max-iter", type=int, default=500)
    a.add_argument("--starts", default="default", help="'default' or a comma list of median,mean,all")
    a.add_argument("--tuning", choices=("item", "difference"), default="item")
    a.add_argument("--seed", type=int, default=None, help="recorded in the report; the analysis itself is deterministic")
    a.add_argument("--screen", action=argparse.BooleanOptionalAction, default=True)
    a.add_argument("--binarize-threshold", type=float, default=None)
    a.add_argument("--format", choices=("json", "csv", "both"), default="both")
    a.add_argument("--out", default=".", help="output directory")
    a.add_argument("--timestamp", default=None, help="fixed value for the report's generated_at field")

    s = sub.add_parser("simulate", help="run a Monte Carlo study")
    s.add_argument("--config", help="TOML or JSON file with SimulationConfig fields")
    s.add_argument("--study", choices=("washout", "preexposure"))
    s.add_argument("--reps", type=int, dest="replications")
    s.add_argument("--seed", type=int)
    s.add_argument("--items", type=int, dest="m")
    s.add_argument("--n-per-group", type=int)
    s.add_argument("--dif-prop", dest="dif_proportions", help="comma-separated proportions")
    s.add_argument("--alpha", type=float)
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--keep-reps", action="store_true")
    s.add_argument("--format", choices=("json", "csv", "both"), default="both")
    s.add_argument("--out", default=".")
    return parser


def _analyze(args):
    settings = AnalysisSettings(
        alpha=args.alpha,
        quad_nodes=args.quad_nodes,
        em_tol=args.em_tol,
        em_max_iter=args.em_max_iter,
        starts=args.starts,
        tuning=args.tuning,
        screen=args.screen,
        binarize_threshold=args.binarize_threshold,
        seed=args.seed,
    )
    data = ingest_csv(args.path, args.binarize_threshold)
    result = analyze_dataset(data, settings, source=args.path, timestamp=args.timestamp)
    paths = write_report(result.report, args.out, fmt=args.format)
    t = result.report["delta_test"]
    print(
        f"delta_U={result.report['naive']['estimate']:.4f} delta_R={result.report['robust']['estimate']:.4f} "
        f"Delta={t['Delta']:.4f} z={t['z']:.3f} p={t['p_value']:.4g}"
    )
    for p in paths:
        print(f"wrote {p}")
    if result.degenerate:
        print("warning: Delta variance is zero; reported z=0, p=1", file=sys.stderr)
        return EXIT_DEGENERATE
    return EXIT_OK


def _simulation_config(args):
    values = dict(load_config(args.config)) if args.config else {}
    for name in ("study", "replications", "seed", "m", "n_per_group", "alpha"):
        v = getattr(args, name)
        if v is not None:
            values[name] = v
    if args.dif_proportions is not None:
        try:
            values["dif_proportions"] = [float(x) for x in args.dif_proportions.split(",")]
        except ValueError:
            raise ConfigError(f"dif_proportions: cannot parse {args.dif_proportions!r}") from None
    return SimulationConfig.from_mapping(values)


def _simulate(args):
    config = _simulation_config(args)
    if args.threads < 1:
        raise ConfigError("threads: must be at least 1")
    summary = run_study(config, threads=args.threads)
    print(f"{'p':>8} {'n_dif':>5} {'reps':>5} {'reject':>7} {'mean_dR':>8} {'mean_Delta':>10}")
    for c in summary.conditions:
        print(f"{c.p:8.4f} {c.n_dif:5d} {c.replications:5d} {c.rejection_rate:7.3f} {c.mean_delta_R:8.4f} {c.mean_Delta:10.4f}")
    for p in write_simulation(summary, args.out, args.format, args.keep_reps, __version__):
        print(f"wrote {p}")
    return EXIT_OK


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _analyze(args) if args.command == "analyze" else _simulate(args)
    except DifgateError as err:
        print(f"error [{err.code}]: {err}", file=sys.stderr)
    except FileNotFoundError as err:
        print(f"error [file_not_found]: {err.filename}: no such file", file=sys.stderr)
    except OSError as err:
        print(f"error [io]: {err}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
