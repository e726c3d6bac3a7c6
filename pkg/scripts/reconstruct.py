"""
Reconstruction Runner
Runs one configured federated reconstruction and writes its outputs

Exit codes: 0 on success, 2 on configuration errors, 3 on runtime errors.
"""

import dataclasses
import logging
import sys
from pathlib import Path

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import load_config, load_runtime_settings
from fedtucker.exceptions import ConfigError
from fedtucker.log_config import setup_logging
from fedtucker.pipeline import run_experiment

logger = logging.getLogger('reconstruct')

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser():
    import argparse

    parser = argparse.ArgumentParser(description='Run a federated tomographic reconstruction')
    parser.add_argument('--config', required=True,
                        help='Experiment config file (key=value, or .yaml/.yml)')
    parser.add_argument('--out', default=None,
                        help='Output directory (default: output_dir from the config)')
    parser.add_argument('--seed', type=int, default=None,
                        help='Override the config seed (unsigned 64-bit)')
    parser.add_argument('--no-progress', action='store_true',
                        help='Disable the epoch progress bar')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        settings = load_runtime_settings()
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    setup_logging(settings.log_level, settings.log_dir)

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed).validate()
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        for problem in e.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"Cannot read config: {e}")
        return EXIT_CONFIG

    try:
        run_experiment(cfg, output_dir=args.out, threads=settings.worker_threads,
                       show_progress=not args.no_progress)
    except Exception as e:
        logger.error(f"Reconstruction failed: {str(e)}", exc_info=True)
        print(f"\n✗ Reconstruction failed: {str(e)}", file=sys.stderr)
        return EXIT_RUNTIME

    print("\n✓ Reconstruction completed successfully!")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
