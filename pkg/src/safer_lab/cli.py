"""Command line entry point: ``safer-lab run|validate|emit-plots``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import OUTPUT_ENV, ConfigInvalid, load_config, validate
from .experiment import emit_plot_data, load_log, run_experiment

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _cmd_validate(args) -> int:
    if not Path(args.config).is_file():
        print(f"{args.config}: no such file", file=sys.stderr)
        return EXIT_CONFIG
    diags = validate(args.config)
    for d in diags:
        print(f"{args.config}:{d}", file=sys.stderr)
    if diags:
        return EXIT_CONFIG
    print(f"{args.config}: ok")
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except FileNotFoundError:
        print(f"{args.config}: no such file", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigInvalid as exc:
        for d in exc.diagnostics:
            print(f"{args.config}:{d}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out) if args.out else cfg.resolved_output()
    try:
        log = run_experiment(cfg, out, args.workers)
    except Exception as exc:
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if log["status"] != "ok":
        print(f"failed runs: {', '.join(log['failed_runs'])}; partial results in {out}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"results written to {out}")
    return EXIT_OK


def _cmd_emit(args) -> int:
    try:
        log = load_log(args.log)
    except (OSError, ValueError) as exc:
        print(f"{args.log}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(args.out) if args.out else Path(args.log).parent / "plots"
    for p in emit_plot_data(log, out):
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safer-lab",
        description=f"Continual unlearning experiments. Output root can be overridden with ${OUTPUT_ENV}.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides config and environment)")
    p.add_argument("--workers", type=int, default=None, help="parallel worker processes")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("validate", help="statically check a config")
    p.add_argument("config")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("emit-plots", help="regenerate plot-data files from a log.json")
    p.add_argument("log")
    p.add_argument("--out", help="directory for the .tsv files (default: <log dir>/plots)")
    p.set_defaults(func=_cmd_emit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
