"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 a theory check reported a violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from coppo.env import GAMES, FIXTURES, make_game
from coppo.harness import ExperimentConfig, emit_plot_data, run_experiment
from coppo.objectives import ConfigError
from coppo.verifier import DEFAULT_FIXTURES, run_checks

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION = 0, 1, 2


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.workers is not None:
        cfg.workers = args.workers
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    cfg.__post_init__()
    out = run_experiment(cfg)
    print(out)
    return EXIT_OK


def _cmd_verify(args) -> int:
    fixtures = [args.fixture] if args.fixture else list(DEFAULT_FIXTURES)
    unknown = [f for f in fixtures if f not in FIXTURES]
    if unknown:
        raise ConfigError(f"unknown fixture {unknown[0]!r}; known: {', '.join(FIXTURES)}")
    if args.trials < 1:
        raise ConfigError("trials must be >= 1")
    reports = run_checks(fixtures, trials=args.trials, seed=args.seed)
    for r in reports:
        print(json.dumps(r))
    return EXIT_VIOLATION if any(r["violations"] for r in reports) else EXIT_OK


def _cmd_emit(args) -> int:
    print(emit_plot_data(args.results_dir, args.out))
    return EXIT_OK


def _cmd_list(args) -> int:
    for gid in GAMES:
        g = make_game(gid)
        print(f"{gid}\t{g.n_agents} agents x {g.n_actions} actions\t{g.name}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coppo", description="Coordinated PPO on cooperative matrix games.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train every variant over every seed and write a results directory")
    run.add_argument("--config", required=True, help="YAML or JSON experiment config")
    run.add_argument("--seeds", type=int, help="override the number of seeds")
    run.add_argument("--workers", type=int, help="parallel (variant, seed) jobs")
    run.add_argument("--output-dir", help="override the output directory")
    run.set_defaults(func=_cmd_run)

    ver = sub.add_parser("verify", help="numerically check the theory on enumerable fixtures")
    ver.add_argument("--fixture", help=f"one of {', '.join(FIXTURES)} (default: all)")
    ver.add_argument("--trials", type=int, default=100)
    ver.add_argument("--seed", type=int, default=0)
    ver.set_defaults(func=_cmd_verify)

    emit = sub.add_parser("emit-plots", help="write tidy per-panel CSVs from a results directory")
    emit.add_argument("results_dir")
    emit.add_argument("--out", help="destination directory (default: <results_dir>/plots)")
    emit.set_defaults(func=_cmd_emit)

    lst = sub.add_parser("list-games", help="list the built-in matrix games")
    lst.set_defaults(func=_cmd_list)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
