"""Command-line front end: ``slowdecay {validate,run,sumrule,lrfit,sweep}``."""
from __future__ import annotations

import argparse
import json
import os
import sys

from .errors import ConfigError, SlowDecayError
from .experiment import (
    ENV_DIM_CAP,
    ENV_WORKERS,
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    ExperimentConfig,
    env_dim_cap,
    env_workers,
    read_json,
    run_experiment,
    run_sweep,
)


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slowdecay", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("validate", "check a config and list every violation"),
        ("run", "full pipeline: state, LR fit, grid, sum rule, decay bound, plot"),
        ("sumrule", "pipeline up to the weighted sum rule (no LR fit)"),
        ("lrfit", "commutator-norm profile and Lieb-Robinson fit only"),
        ("sweep", "parallel parameter sweep over L, lam, beta, boost_k, tilt"),
    ]:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, help="JSON config file")
        if name != "validate":
            sp.add_argument("--out", default=None, help="output directory (overrides config output_dir)")
            sp.add_argument("--workers", type=int, default=None,
                            help=f"parallel workers (default: ${ENV_WORKERS} or 1)")
    return p


def _invocation(args) -> dict:
    return {
        "command": args.command,
        "config": os.path.abspath(args.config),
        "out": args.out,
        "workers": args.workers,
        "env": {k: os.environ[k] for k in (ENV_WORKERS, ENV_DIM_CAP) if k in os.environ},
        "dim_cap": env_dim_cap(),
    }


def _report(manifest: dict) -> None:
    for a in manifest["assertions"]:
        status = {True: "PASS", False: "FAIL", None: "info"}[a["passed"]]
        value = "n/a" if a["value"] is None else f"{a['value']:.3e}"
        print(f"[{status}] {a['name']}: {value}" + (f" ({a['note']})" if a["note"] else ""))
    m = manifest["measurements"]
    if "current" in m:
        print(f"<j> = {m['current']:.12g}   V_lr = {m.get('V_lr')}   t_max = {m.get('t_max')}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "sweep":
            sweep = read_json(args.config)
            rows, code = run_sweep(sweep, args.out, workers=args.workers or env_workers())
            for row in rows:
                print(f"point {row['point']:3d}: {row['status']} {row['error']}")
            return code
        config = ExperimentConfig.load(args.config)
        if args.command == "validate":
            print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        result = run_experiment(config, args.out, stage=args.command, invocation=_invocation(args))
        _report(result.manifest)
        print(f"artifacts in {result.out_dir}")
        return result.exit_code
    except ConfigError as exc:
        for violation in exc.violations:
            print(f"config error: {violation}", file=sys.stderr)
        return EXIT_CONFIG
    except SlowDecayError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
