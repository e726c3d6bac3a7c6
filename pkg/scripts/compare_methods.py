"""
Method Comparison Runner
Runs several aggregation schemes over several seeds on one base config and
tabulates best SSIM, stop-epoch SSIM and GCE per scheme
"""

import dataclasses
import logging
import sys
from pathlib import Path

import pandas as pd

# Add parent directory to path
sys.path.append(str(Path(__file__).parent.parent))

from config import ExperimentConfig, load_config, load_runtime_settings
from fedtucker.compression import tucker_fraction
from fedtucker.exceptions import ConfigError
from fedtucker.federation import run_epochs
from fedtucker.log_config import setup_logging

logger = logging.getLogger('compare_methods')

# Largest Tucker rank the Top-k variant is matched against
TOPK_REFERENCE_RANK = 10

# Variant name -> config overrides
VARIANTS = {
    'firm': {'method': 'firm'},
    'firm_csr': {'method': 'firm', 'encoding': 'csr'},
    'firm_topk': {'method': 'firm', 'topk': None},
    'fulldecomp': {'method': 'fulldecomp'},
    'compjf': {'method': 'compjf'},
    'comprandjf': {'method': 'comprandjf'},
    'compavg': {'method': 'compavg'},
    'compjf_hetero_fixed': {'method': 'compjf', 'hetero': 'fixed'},
    'compjf_hetero_epoch': {'method': 'compjf', 'hetero': 'per_epoch'},
}


def variant_config(base: ExperimentConfig, name, seed):
    """
    Derive the config for one variant and seed

    The Top-k variant keeps the same share of entries as a Tucker message at
    min(base rank, TOPK_REFERENCE_RANK), so both compress each round by the
    same amount. Shares above 100% are clamped with a warning.
    """
    overrides = dict(VARIANTS[name])
    if name == 'firm_topk':
        rank = base.ranks if isinstance(base.ranks, int) else max(base.ranks)
        rank = min(rank, TOPK_REFERENCE_RANK)
        share = round(100.0 * tucker_fraction(base.grid, (rank, rank)), 6)
        if share > 100.0:
            logger.warning(f"Tucker rank {rank} does not compress a {base.grid} grid; "
                           f"firm_topk falls back to k=100 (no compression)")
            share = 100.0
        overrides['topk'] = share
    overrides.setdefault('hetero', 'none')
    return dataclasses.replace(base, seed=seed, **overrides).validate()


def compare(base: ExperimentConfig, variants, seeds, threads=1):
    """
    Run every (variant, seed) pair

    Returns:
        DataFrame with one row per run
    """
    records = []
    for name in variants:
        for seed in seeds:
            cfg = variant_config(base, name, seed)
            logger.info(f"Running {name} with seed {seed}")
            summary = run_epochs(cfg, threads=threads).summary()
            records.append({
                'variant': name,
                'seed': seed,
                'mean_best_ssim': summary['mean_best_ssim'],
                'gce_epoch': summary['gce_epoch'],
                'gce_ssim': summary['gce_ssim'],
                'gce': summary['gce'],
                'total_bits': summary['total_bits'],
            })
    return pd.DataFrame.from_records(records)


if __name__ == "__main__":
    import argparse

    parser = argparse.ArgumentParser(description='Compare aggregation schemes over seeds')
    parser.add_argument('--config', default=None,
                        help='Base config file (default: built-in defaults)')
    parser.add_argument('--variants', nargs='+', default=list(VARIANTS),
                        choices=list(VARIANTS), help='Variants to run')
    parser.add_argument('--seeds', type=int, default=10,
                        help='Number of seeds, 0..n-1 (default: 10)')
    parser.add_argument('--out', default='results/comparison.csv',
                        help='Output CSV path')

    args = parser.parse_args()

    try:
        settings = load_runtime_settings()
        setup_logging(settings.log_level, settings.log_dir)
        base = load_config(args.config) if args.config else ExperimentConfig().validate()
        frame = compare(base, args.variants, range(args.seeds),
                        threads=settings.worker_threads)
    except ConfigError as e:
        print(f"\nConfig error: {e}")
        sys.exit(2)
    except Exception as e:
        logger.error(f"Comparison failed: {str(e)}", exc_info=True)
        sys.exit(3)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False)

    print("\n" + "=" * 60)
    print("METHOD COMPARISON")
    print("=" * 60)
    print(frame.groupby('variant')[['mean_best_ssim', 'gce_ssim', 'gce']].mean().to_string())
    print("=" * 60 + "\n")
