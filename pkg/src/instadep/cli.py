"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config

log = logging.getLogger("instadep")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="instadep", description="Lagged vs instantaneous dynamics-model experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config", help="YAML config file")
    run.add_argument("-o", "--output-dir", help="override output_dir from the config")
    th = sub.add_parser("theory-report", help="run the numerical identity checks and print a JSON report")
    th.add_argument("--config", help="optional YAML config supplying theory.n_mc, theory.rho and seeds")
    th.add_argument("-o", "--output", help="also write the report to this path")
    th.add_argument("--n-mc", type=int, help="Monte Carlo sample size")
    val = sub.add_parser("validate", help="check a config file without running it")
    val.add_argument("config", help="YAML config file")
    return p


def _load(path: str):
    if not Path(path).is_file():
        raise ConfigError([f"config file not found: {path}"])
    return load_config(path)


def _report_config_error(path: str, exc: ConfigError) -> int:
    for problem in exc.problems:
        print(f"{path}: {problem}", file=sys.stderr)
    return EXIT_CONFIG


def cmd_run(args) -> int:
    from .experiments import run_experiment

    try:
        cfg = _load(args.config)
    except ConfigError as exc:
        return _report_config_error(args.config, exc)
    try:
        result = run_experiment(cfg, args.output_dir)
    except ConfigError as exc:
        return _report_config_error(args.config, exc)
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        log.exception("experiment failed")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for path in result.get("files", []):
        print(path)
    return EXIT_OK


def cmd_theory_report(args) -> int:
    from .experiments import theory_report, write_json

    n_mc, rho, seed = 1_000_000, 0.9, 0
    if args.config:
        try:
            cfg = _load(args.config)
        except ConfigError as exc:
            return _report_config_error(args.config, exc)
        n_mc, rho, seed = cfg.theory["n_mc"], cfg.theory["rho"], cfg.seeds[0]
    if args.n_mc is not None:
        if args.n_mc < 100:
            print("--n-mc must be >= 100", file=sys.stderr)
            return EXIT_CONFIG
        n_mc = args.n_mc
    try:
        rep = theory_report(n_mc, rho, seed)
    except Exception as exc:  # noqa: BLE001
        log.exception("theory report failed")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        write_json(Path(args.output), rep)
    from .experiments import _jsonable
    print(json.dumps(_jsonable(rep), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        cfg = _load(args.config)
    except ConfigError as exc:
        return _report_config_error(args.config, exc)
    print(f"{args.config}: ok ({cfg.experiment}, {len(cfg.seeds)} seed(s))")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handler = {"run": cmd_run, "theory-report": cmd_theory_report, "validate": cmd_validate}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
