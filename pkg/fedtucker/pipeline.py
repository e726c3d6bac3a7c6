"""
Experiment Pipeline Orchestrator
Coordinates setup, federated training and output writing for one configured run
"""

import json
import logging
import math
from datetime import datetime
from pathlib import Path

from config import load_runtime_settings
from fedtucker.federation import FederatedReconstruction
from fedtucker.metrics import MetricsLog
from fedtucker.tomography import write_graymap

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.csv'
SUMMARY_FILE = 'summary.json'


def _json_number(value):
    # JSON has no infinity; GCE and PSNR can be unbounded
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def write_outputs(log: MetricsLog, cfg, output_dir):
    """
    Write metrics.csv, summary.json and graymaps for a finished run

    Args:
        log: MetricsLog from the engine
        cfg: ExperimentConfig that produced it
        output_dir: Target directory (created if missing)

    Returns:
        Dictionary of written paths
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    metrics_path = output_dir / METRICS_FILE
    # repr-style float formatting is the shortest round-trip decimal
    log.to_frame().to_csv(metrics_path, index=False, float_format=None, lineterminator='\n')
    logger.info(f"Wrote {len(log.rows)} metric rows to {metrics_path}")

    summary = {key: _json_number(value) for key, value in log.summary().items()}
    summary['config'] = cfg.to_text()
    summary['config_values'] = {k: list(v) if isinstance(v, tuple) else v
                                for k, v in cfg.to_dict().items()}
    summary_path = output_dir / SUMMARY_FILE
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.info(f"Wrote summary to {summary_path}")

    images_dir = output_dir / 'images'
    written = []
    for client, truth in enumerate(log.truths):
        written.append(write_graymap(images_dir / f"client{client}_truth.pgm", truth))
        if client in log.best_images:
            written.append(write_graymap(images_dir / f"client{client}_best.pgm",
                                         log.best_images[client]))
        if client < len(log.final_images):
            written.append(write_graymap(images_dir / f"client{client}_final.pgm",
                                         log.final_images[client]))
    logger.info(f"Wrote {len(written)} graymaps to {images_dir}")

    return {'metrics': metrics_path, 'summary': summary_path, 'images': written}


class ExperimentPipeline:
    """Main experiment orchestrator"""

    def __init__(self, cfg, threads=None, show_progress=False):
        self.cfg = cfg
        self.threads = threads or load_runtime_settings().worker_threads
        self.show_progress = show_progress
        self.start_time = None
        self.engine = None
        self.log = None
        self.stats = {
            'setup': {'status': 'Not Started'},
            'train': {'status': 'Not Started', 'epochs': 0},
            'write': {'status': 'Not Started', 'files': 0},
        }

    def run(self, output_dir=None):
        """
        Execute setup, training and output writing

        Args:
            output_dir: Overrides cfg.output_dir

        Returns:
            MetricsLog of the run
        """
        self.start_time = datetime.now()
        output_dir = Path(output_dir or self.cfg.output_dir)
        logger.info(f"Starting experiment: method={self.cfg.method}, seed={self.cfg.seed}")

        logger.info("=" * 60)
        logger.info("STAGE 1: SETUP")
        logger.info("=" * 60)
        self._setup()

        logger.info("=" * 60)
        logger.info("STAGE 2: FEDERATED TRAINING")
        logger.info("=" * 60)
        self._train()

        logger.info("=" * 60)
        logger.info("STAGE 3: WRITE OUTPUTS")
        logger.info("=" * 60)
        self._write(output_dir)

        duration = (datetime.now() - self.start_time).total_seconds()
        logger.info("=" * 60)
        logger.info(f"EXPERIMENT COMPLETED in {duration:.2f} seconds")
        logger.info("=" * 60)
        self._log_summary()
        return self.log

    def _setup(self):
        try:
            self.engine = FederatedReconstruction(self.cfg, threads=self.threads,
                                                  show_progress=self.show_progress)
            self.engine.setup()
            self.stats['setup'] = {'status': 'Success'}
        except Exception as e:
            self.stats['setup']['status'] = 'Failed'
            logger.error(f"Setup failed: {str(e)}")
            raise

    def _train(self):
        try:
            self.log = self.engine.run()
            self.stats['train'] = {'status': 'Success', 'epochs': self.log.last_epoch}
        except Exception as e:
            self.stats['train']['status'] = 'Failed'
            logger.error(f"Training failed: {str(e)}")
            raise

    def _write(self, output_dir):
        try:
            paths = write_outputs(self.log, self.cfg, output_dir)
            self.stats['write'] = {'status': 'Success', 'files': 2 + len(paths['images'])}
        except Exception as e:
            self.stats['write']['status'] = 'Failed'
            logger.error(f"Writing outputs failed: {str(e)}")
            raise

    def _log_summary(self):
        summary = self.log.summary()
        logger.info(f"Epochs run: {self.log.last_epoch}, early stop: {summary['stop_epoch']}")
        logger.info(f"Mean best SSIM: {summary['mean_best_ssim']:.4f}")
        logger.info(f"GCE: {summary['gce']:.6g} at epoch {summary['gce_epoch']}")
        logger.info(f"Total bits: {summary['total_bits']:,}")
        for stage, info in self.stats.items():
            logger.info(f"{stage.upper():8} | Status: {info['status']}")


def run_experiment(cfg, output_dir=None, threads=None, show_progress=False) -> MetricsLog:
    """
    Convenience function to run one configured experiment

    Args:
        cfg: Validated ExperimentConfig
        output_dir: Output directory, defaults to cfg.output_dir
        threads: Worker threads, defaults to FEDTUCKER_THREADS or the CPU count
        show_progress: Show a tqdm progress bar over epochs

    Returns:
        MetricsLog
    """
    pipeline = ExperimentPipeline(cfg, threads=threads, show_progress=show_progress)
    return pipeline.run(output_dir)
