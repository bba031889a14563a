"""Command-line experiment runner.

Subcommands mirror the pipeline stages: gen-data, meta-train, train,
transfer, curve, report. Every command takes --config (a JSON experiment
document); --out, --seed, and --jobs override the config. Exit codes:
0 success, 1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import __version__
from .errors import ConfigError
from .experiment import (
    RunPaths,
    default_experiment_config,
    load_experiment_config,
    stage_curve,
    stage_gen_data,
    stage_meta_train,
    stage_train_separate,
    stage_transfer,
    update_manifest,
)
from .report import stage_report

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

STAGES = {
    "gen-data": lambda cfg, paths, jobs, log: stage_gen_data(cfg, paths, log=log),
    "meta-train": lambda cfg, paths, jobs, log: stage_meta_train(cfg, paths, log=log),
    "train": lambda cfg, paths, jobs, log: stage_train_separate(cfg, paths, log=log),
    "transfer": lambda cfg, paths, jobs, log: stage_transfer(cfg, paths, log=log),
    "curve": lambda cfg, paths, jobs, log: stage_curve(cfg, paths, jobs=jobs, log=log),
    "report": lambda cfg, paths, jobs, log: stage_report(cfg, paths, log=log),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metaloc",
        description="Multi-environment positioning experiments on a synthetic multipath channel",
    )
    parser.add_argument("--version", action="version", version=f"metaloc {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen-data", "generate one fingerprint dataset per environment"),
        ("meta-train", "jointly train the shared trunk over all source environments"),
        ("train", "train each source environment separately (baseline)"),
        ("transfer", "run one transfer cell (config `transfer` block picks it)"),
        ("curve", "full transfer sweep over source counts and target sample counts"),
        ("report", "summary table and figures from persisted CSVs"),
        ("print-config", "print the default desk-scale experiment config"),
    ]:
        p = sub.add_parser(name, help=help_text)
        if name != "print-config":
            p.add_argument("--config", required=True, help="experiment config JSON")
            p.add_argument("--out", default=None, help="override the config's output directory")
            p.add_argument("--seed", type=int, default=None, help="override the global seed")
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "print-config":
        print(json.dumps(default_experiment_config(), indent=2))
        return EXIT_OK
    try:
        cfg, raw = load_experiment_config(args.config)
        overrides = {}
        if args.out is not None:
            cfg = replace(cfg, out_dir=args.out)
            overrides["out_dir"] = args.out
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
            overrides["seed"] = args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    paths = RunPaths(cfg.out_dir)
    log = lambda msg: print(msg, flush=True)
    try:
        artifacts = STAGES[args.command](cfg, paths, args.jobs, log)
        update_manifest(paths, raw, args.command, artifacts, overrides or None)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - boundary: report and set exit status
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
