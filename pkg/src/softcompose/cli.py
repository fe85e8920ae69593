"""``softcompose solve|compose|eval|sweep|temporal|counterexample --config FILE``."""

from __future__ import annotations

import argparse
import json
import sys

from .experiments import COMMANDS, ClaimViolated, ExperimentConfig
from .solver import SolverDivergenceError

EXIT_OK, EXIT_CLAIM, EXIT_VALIDATION, EXIT_DIVERGENCE = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="softcompose",
                                description="Exact soft-RL solving and value-function composition.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="base RNG seed (overrides the config)")
    p.add_argument("--tau", type=float, help="temperature (overrides the config)")
    p.add_argument("--learn", action="store_true", help="solve with tabular soft Q-learning")
    p.add_argument("--baseline", action="store_true",
                   help="temporal: compare with the exact collect-all optimum")
    return p


def load_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            raw = json.load(fh)
    if args.out is not None:
        raw["out"] = args.out
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.tau is not None:
        raw["tau"] = args.tau
    if args.learn:
        raw["learn"] = True
    if args.baseline:
        raw["baseline"] = True
    return ExperimentConfig.from_dict(raw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        report = COMMANDS[args.command](cfg)
    except SolverDivergenceError as e:
        print(f"softcompose: solver diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except ClaimViolated as e:
        print(f"softcompose: check failed: {e}", file=sys.stderr)
        return EXIT_CLAIM
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"softcompose: invalid input: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps({k: v for k, v in report.items() if k != "config"}, sort_keys=True,
                     default=str)[:2000])
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
