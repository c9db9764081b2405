#!/usr/bin/env python3
"""
Plasticity Lab - Main Entry Point

Commands:
1. run <config>: replicated runs of one configuration
2. sweep <config>: every point of the config's grid, best point selected
3. report <dir>: summary tables of a results directory
4. fetch-mnist: download the MNIST IDX files

<config> is a YAML file or a preset name from config/presets.yaml. Any
configuration key can be overridden with --key=value.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 data error,
4 every run diverged.
"""

import argparse
import logging
import os
import sys
from datetime import datetime

from dotenv import load_dotenv


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        datefmt='%Y-%m-%dT%H:%M:%S',
    )


def run_command(source: str, overrides) -> int:
    """Run one configuration and write its metrics"""
    from src.config_loader import parse_config
    from src.experiment import run_experiment

    cfg = parse_config(source, overrides)
    print(f"[{datetime.now().isoformat()}] Starting {cfg.name}: {cfg.problem}, "
          f"{cfg.learner}/{cfg.optimizer}, mitigations={cfg.mitigations or 'none'}, {cfg.n_runs} runs...")

    result = run_experiment(cfg)
    summary = result.summary
    for r in result.runs:
        state = f"diverged at step {r.diverged_at}" if r.diverged else "ok"
        print(f"  - run {r.run} (seed {r.seed}): {r.steps} steps, "
              f"{r.replacements} replacements, {state}")

    metric = 'online_accuracy' if cfg.problem == 'pmnist' else 'squared_error'
    print(f"Mean {metric}: {summary.overall(metric):.6g} over {summary.n_runs - len(summary.diverged_runs)} runs")
    if result.paths:
        print(f"Saved results to {result.paths[0].parent}")

    if summary.all_diverged:
        print("Every run diverged")
        return EXIT_DIVERGED
    print("Done!")
    return EXIT_OK


def sweep_command(source: str, overrides) -> int:
    """Run every grid point and report the best"""
    from src.config_loader import parse_sweep_config
    from src.sweep import STATUS_OK, sweep

    cfg, grid = parse_sweep_config(source, overrides)
    print(f"[{datetime.now().isoformat()}] Starting sweep {cfg.name} over {', '.join(grid)}...")

    result = sweep(cfg, grid)
    print("\n=== Sweep table ===")
    print(result.table.to_string(index=False))

    if result.best is None:
        print("\nNo point finished without divergence")
        healthy = [p for p in result.points if p.status == STATUS_OK]
        return EXIT_DIVERGED if not healthy else EXIT_FAILURE

    best = result.points[result.best]
    print(f"\nBest point {best.index}: {best.params} ({result.metric} {best.score:.6g})")
    if result.final is not None:
        print(f"With {result.final.n_runs} runs: {result.metric} {result.final.overall(result.metric):.6g}")
    print("Done!")
    return EXIT_OK


def report_command(directory: str) -> int:
    from src.metrics import build_report

    print(build_report(directory))
    return EXIT_OK


def fetch_command(data_dir: str = None, force: bool = False) -> int:
    from src.config_loader import get_config, resolve_data_dir
    from src.problems.mnist_fetcher import fetch_mnist

    target = resolve_data_dir(data_dir)
    base_url = os.getenv("MNIST_BASE_URL") or get_config().get_setting('mnist_base_url')
    print(f"[{datetime.now().isoformat()}] Fetching MNIST into {target}...")
    paths = fetch_mnist(target, base_url=base_url, force=force)
    print(f"{len(paths)} files in {target}")
    print("Done!")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-v', '--verbose', action='store_true', help='Debug logging')

    parser = argparse.ArgumentParser(
        description='Loss-of-plasticity experiments',
        epilog='Override any configuration key with --key=value, e.g. --step_size=0.003',
    )
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', parents=[common], help='Run one configuration')
    run.add_argument('config', help='YAML file or preset name')

    sweep = commands.add_parser('sweep', parents=[common], help='Sweep a configuration grid')
    sweep.add_argument('config', help='YAML file or preset name with a grid')

    report = commands.add_parser('report', parents=[common], help='Summarize a results directory')
    report.add_argument('directory')

    fetch = commands.add_parser('fetch-mnist', parents=[common], help='Download MNIST')
    fetch.add_argument('--data-dir', default=None, help='Target directory')
    fetch.add_argument('--force', action='store_true', help='Download even if present')
    return parser


def main(argv=None) -> int:
    # Load environment variables
    load_dotenv()

    from src.errors import ConfigError, DataError, PlasticityError

    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    setup_logging(args.verbose)

    if extra and args.command not in ('run', 'sweep'):
        parser.error(f"unrecognized arguments: {' '.join(extra)}")

    try:
        if args.command == 'run':
            return run_command(args.config, extra)
        if args.command == 'sweep':
            return sweep_command(args.config, extra)
        if args.command == 'report':
            return report_command(args.directory)
        return fetch_command(args.data_dir, args.force)
    except ConfigError as e:
        print(f"Configuration error: {e}")
        return EXIT_CONFIG
    except DataError as e:
        print(f"Data error: {e}")
        return EXIT_DATA
    except PlasticityError as e:
        print(f"Error: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
