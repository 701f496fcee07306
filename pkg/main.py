"""
Command-line entry point for safe exploration experiments.

Commands:
    generate-env    sample a random time-variant environment and write it
    run             run the configured policies over seeded Monte-Carlo runs
    ingest-terrain  build an environment from a grayscale image stack
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

# Add src directory to path
sys.path.append(os.path.join(os.path.dirname(__file__), 'src'))

from artifacts import save_environment
from config import Config, ConfigError, ExperimentConfig, derive_seed, ENVIRONMENT_STREAM, resolve_seed
from env import EnvFormatError, generate_random_env, load_terrain_files
from experiment import ExperimentRunner

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def setup_logging() -> None:
    """Configure root logging to the log file and the console."""
    log_path = Path(Config.LOG_FILE)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(log_path),
            logging.StreamHandler()
        ]
    )


def _csv_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(',') if item.strip()]


def _grid(text: str):
    try:
        rows, cols = (int(v) for v in text.split(','))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--grid expects ROWS,COLS, got {text!r}")
    return rows, cols


def cmd_generate_env(args) -> int:
    """Sample one random environment and write it with its metadata."""
    config = ExperimentConfig.load(args.config)
    if config.environment.kind != 'random':
        raise ConfigError(f"generate-env needs a random environment, got kind {config.environment.kind!r}")
    base_seed = resolve_seed(config.seed, args.seed)
    seed = derive_seed(base_seed, args.run_index, ENVIRONMENT_STREAM)
    world = generate_random_env(config.environment.gen_spec(seed=seed, horizon=config.horizon))
    out = Path(args.out or Path(config.output_dir) / 'environment.csv')
    save_environment(world, out, extra={'base_seed': base_seed, 'run_index': args.run_index})

    summary = world.describe()
    print(f"Environment written to {out}")
    print(f"  Size: {summary['rows']}x{summary['cols']}")
    print(f"  Horizon: {summary['horizon']}")
    print(f"  S_0: {summary['initial_safe']}")
    print(f"  g range: [{summary['g_min']:.4f}, {summary['g_max']:.4f}]")
    print(f"  Lipschitz (per cell, per step): {summary['lipschitz_space']:.4f}, {summary['lipschitz_time']:.4f}")
    return EXIT_OK


def cmd_run(args) -> int:
    """Run all configured policies and write traces, metrics and the summary."""
    config = ExperimentConfig.load(args.config)
    if args.policies:
        config.policies = _csv_list(args.policies)
    if args.runs is not None:
        config.runs = args.runs
    if args.workers is not None:
        config.workers = args.workers
    if args.output_dir:
        config.output_dir = args.output_dir
    config.validate()
    base_seed = resolve_seed(config.seed, args.seed)

    runner = ExperimentRunner(config, base_seed)
    result = runner.run()
    if result.summary is not None:
        print(result.summary.to_string(index=False, na_rep='-', float_format=lambda v: f"{v:.3f}"))
    if result.partial:
        logger.error(f"❌ {len(result.failures)} run(s) failed; see {runner.output_dir / 'PARTIAL'}")
        return EXIT_RUNTIME
    logger.info(f"✅ Outputs written to {runner.output_dir}")
    return EXIT_OK


def cmd_ingest_terrain(args) -> int:
    """Build a terrain environment from a frame stack and write it."""
    frames = _csv_list(args.frames)
    for frame in frames:
        if not Path(frame).exists():
            raise ConfigError(f"Terrain frame not found: {frame}")
    world = load_terrain_files(frames, args.steps, args.h, args.noise_std, args.grid)
    save_environment(world, args.out, extra={'frames': frames, 'steps': args.steps})
    print(f"Terrain environment written to {args.out}")
    print(f"  Size: {world.rows}x{world.cols}, slices: {world.horizon}, h: {world.h}")
    print(f"  Pixel range: [{world.metadata['pixel_min']}, {world.metadata['pixel_max']}]")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Safe exploration of time-variant grid worlds")
    sub = parser.add_subparsers(dest='command', required=True)

    gen = sub.add_parser('generate-env', help='Sample a random environment')
    gen.add_argument('--config', required=True, help='Experiment config (JSON)')
    gen.add_argument('--seed', type=int, help='Base seed (overrides config and SAFE_EXPLORE_SEED)')
    gen.add_argument('--run-index', type=int, default=0, help='Run index whose environment to sample')
    gen.add_argument('--out', help='Output CSV (default: <output_dir>/environment.csv)')
    gen.set_defaults(func=cmd_generate_env)

    run = sub.add_parser('run', help='Run the configured experiment')
    run.add_argument('--config', required=True, help='Experiment config (JSON)')
    run.add_argument('--policies', help='Comma-separated policies to run')
    run.add_argument('--runs', type=int, help='Number of Monte-Carlo runs')
    run.add_argument('--workers', type=int, help='Parallel worker processes')
    run.add_argument('--seed', type=int, help='Base seed (overrides config and SAFE_EXPLORE_SEED)')
    run.add_argument('--output-dir', help='Output directory')
    run.set_defaults(func=cmd_run)

    ingest = sub.add_parser('ingest-terrain', help='Build an environment from terrain frames')
    ingest.add_argument('--frames', required=True, help='Comma-separated frame files (.pgm or .csv)')
    ingest.add_argument('--steps', type=int, required=True, help='Number of time slices')
    ingest.add_argument('--h', type=float, required=True, help='Safety threshold')
    ingest.add_argument('--out', required=True, help='Output CSV')
    ingest.add_argument('--grid', type=_grid, help='Resample frames to ROWS,COLS')
    ingest.add_argument('--noise-std', type=float, default=0.001, help='Observation noise std')
    ingest.set_defaults(func=cmd_ingest_terrain)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    setup_logging()
    if not Config.validate():
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, EnvFormatError, OSError) as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"Runtime failure: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
