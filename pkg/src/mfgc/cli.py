"""Command-line entry point: ``mfgc <experiment> --config FILE [options]``.

Exit codes: 0 when every acceptance band passes, 2 when a band fails,
1 on configuration or execution errors. ``MFGC_LOG`` selects the log level
(``error``, ``info`` or ``debug``).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import EXPERIMENTS, load_config, schema_text
from .errors import ConfigError, MfgcError
from .experiments import run_experiment
from .plots import PLOT_KINDS, emit_plots

__all__ = ["main", "run", "build_parser"]

EXIT_OK, EXIT_ERROR, EXIT_FAILED_BAND = 0, 1, 2
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("mfgc")


def _setup_logging():
    name = os.environ.get("MFGC_LOG", "error").lower()
    level = LOG_LEVELS.get(name, logging.ERROR)
    if not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        log.addHandler(handler)
    log.setLevel(level)
    if name not in LOG_LEVELS:
        log.error("unknown MFGC_LOG value %r; using 'error'", name)


def _default_workers():
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def run(config_path, experiment=None, seed=None, out=None, workers=None):
    """Run one experiment from a config file and return the exit code.

    Parameters
    ----------
    config_path : path
    experiment : str, optional
        Overrides (or supplies) the config's ``experiment`` key.
    seed : int, optional
        Overrides the config seed.
    out : path, optional
        Overrides ``output_dir``.
    workers : int, optional
        Thread count; defaults to the available parallelism. Outputs do not
        depend on it.
    """
    _setup_logging()
    try:
        cfg = load_config(config_path)
        if experiment is not None:
            if experiment not in EXPERIMENTS:
                raise ConfigError(f"unknown experiment {experiment!r}")
            if cfg.experiment and cfg.experiment != experiment:
                log.info("command line selects %s over config experiment %s", experiment, cfg.experiment)
            cfg.values["experiment"] = experiment
        if not cfg.experiment:
            raise ConfigError(f"{cfg.source}: no experiment given in the config or on the command line")
        if seed is not None:
            if not 0 <= int(seed) < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg.values["seed"] = int(seed)
        out_dir = Path(out if out is not None else cfg["output_dir"])
        outcome = run_experiment(cfg, out_dir, workers or _default_workers())
    except ConfigError as exc:
        log.error("%s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (MfgcError, ValueError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for name, band in outcome.bands.items():
        print(f"{'PASS' if band['passed'] else 'FAIL'} {outcome.experiment} {name}: {band['value']}")
    for note in outcome.notes:
        print(f"NOTE {outcome.experiment} {note}")
    return EXIT_OK if outcome.passed else EXIT_FAILED_BAND


def build_parser():
    parser = argparse.ArgumentParser(prog="mfgc", description="Mean field games of controls experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="path to a key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--workers", type=int, help="worker threads (default: available parallelism)")
    p = sub.add_parser("plot", help="render a report CSV as SVG")
    p.add_argument("csv", help="CSV written by an experiment")
    p.add_argument("--kind", required=True, help="one of " + ", ".join(PLOT_KINDS))
    p.add_argument("--out", help="output directory (default: next to the CSV)")
    sub.add_parser("schema", help="print the config schema")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(schema_text())
        return EXIT_OK
    if args.command == "plot":
        _setup_logging()
        try:
            for path in emit_plots(args.csv, args.kind, args.out):
                print(path)
        except (MfgcError, ValueError, OSError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ERROR
        return EXIT_OK
    if args.workers is not None and args.workers < 1:
        print("error: --workers must be at least 1", file=sys.stderr)
        return EXIT_ERROR
    return run(args.config, args.command, args.seed, args.out, args.workers)


if __name__ == "__main__":
    sys.exit(main())
