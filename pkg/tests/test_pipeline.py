"""
Integration tests for the experiment pipeline and the command-line runners
"""

import json
import logging
import sys
from pathlib import Path

import pandas as pd
import pytest

sys.path.append(str(Path(__file__).parent.parent))
sys.path.append(str(Path(__file__).parent.parent / 'scripts'))

from config import ExperimentConfig, parse_config
from fedtucker.metrics import METRICS_COLUMNS, gce
from fedtucker.pipeline import METRICS_FILE, SUMMARY_FILE, ExperimentPipeline, run_experiment
from fedtucker.tomography import read_graymap

import compare_methods
import reconstruct

SMALL_CONFIG = ('method=compjf\ngrid=16x16\nangles=10\nbeamlets=23\nclients=3\n'
                'noise=0.1\nranks=6\nrank_range=2,8\nepochs=3\nssim_scales=1\n')


def small_config(**overrides):
    cfg = parse_config(SMALL_CONFIG)
    values = cfg.to_dict()
    values.update(overrides)
    return ExperimentConfig(**values).validate()


class TestRunExperiment:
    """Test output files of a full run"""

    def test_metrics_header(self, tmp_path):
        run_experiment(small_config(), output_dir=tmp_path, threads=1)
        header = (tmp_path / METRICS_FILE).read_text(encoding='utf-8').splitlines()[0]
        assert header == 'epoch,client,loss,psnr,ssim,uplink_bits,downlink_bits,cum_bits,stopped'
        assert header.split(',') == METRICS_COLUMNS

    def test_rows_per_epoch(self, tmp_path):
        run_experiment(small_config(epochs=2), output_dir=tmp_path, threads=1)
        frame = pd.read_csv(tmp_path / METRICS_FILE)
        assert len(frame) == 3 * 3
        assert frame['cum_bits'].is_monotonic_increasing

    def test_zero_epochs(self, tmp_path):
        run_experiment(small_config(epochs=0), output_dir=tmp_path, threads=1)
        lines = (tmp_path / METRICS_FILE).read_text(encoding='utf-8').splitlines()
        assert len(lines) == 1 + 3
        frame = pd.read_csv(tmp_path / METRICS_FILE)
        assert (frame['cum_bits'] == 0).all()

    def test_byte_identical_reruns(self, tmp_path):
        run_experiment(small_config(), output_dir=tmp_path / 'a', threads=1)
        run_experiment(small_config(), output_dir=tmp_path / 'b', threads=2)
        first = (tmp_path / 'a' / METRICS_FILE).read_bytes()
        second = (tmp_path / 'b' / METRICS_FILE).read_bytes()
        assert first == second

    def test_summary_gce_matches_metrics(self, tmp_path):
        run_experiment(small_config(), output_dir=tmp_path, threads=1)
        summary = json.loads((tmp_path / SUMMARY_FILE).read_text(encoding='utf-8'))
        frame = pd.read_csv(tmp_path / METRICS_FILE)

        epoch = summary['gce_epoch']
        assert epoch == 3
        mean_ssim = min(max(frame.loc[frame['epoch'] == epoch, 'ssim'].mean(), 0.0), 1.0)
        per_epoch = frame.groupby('epoch').first()
        volumes = (per_epoch['uplink_bits'] + per_epoch['downlink_bits']).loc[1:epoch].tolist()
        assert summary['gce'] == pytest.approx(gce(mean_ssim, volumes, 0.01))
        assert summary['total_bits'] == frame['cum_bits'].max()

    def test_config_echo_round_trips(self, tmp_path):
        cfg = small_config(seed=12)
        run_experiment(cfg, output_dir=tmp_path, threads=1)
        summary = json.loads((tmp_path / SUMMARY_FILE).read_text(encoding='utf-8'))
        assert parse_config(summary['config']) == cfg
        assert summary['config_values']['grid'] == [16, 16]

    def test_graymaps_written(self, tmp_path):
        log = run_experiment(small_config(), output_dir=tmp_path, threads=1)
        images = tmp_path / 'images'
        for client in range(3):
            for kind in ('truth', 'best', 'final'):
                assert (images / f"client{client}_{kind}.pgm").exists()
        truth = read_graymap(images / 'client0_truth.pgm')
        assert truth.shape == log.truths[0].shape

    def test_stage_stats(self, tmp_path):
        pipeline = ExperimentPipeline(small_config(epochs=1), threads=1)
        pipeline.run(tmp_path)
        assert all(info['status'] == 'Success' for info in pipeline.stats.values())
        assert pipeline.stats['train']['epochs'] == 1
        assert pipeline.stats['write']['files'] == 2 + 3 * 3

    def test_failed_stage_is_recorded(self, tmp_path):
        # Unvalidated NaN step size fails the first gradient step
        cfg = ExperimentConfig(grid=(16, 16), angles=10, beamlets=23, clients=3, ranks=6,
                               epochs=1, ssim_scales=1, lr=float('nan'))
        pipeline = ExperimentPipeline(cfg, threads=1)
        with pytest.raises(Exception):
            pipeline.run(tmp_path)
        assert 'Failed' in {info['status'] for info in pipeline.stats.values()}


class TestReconstructScript:
    """Test exit codes of the reconstruct runner"""

    def test_success(self, tmp_path):
        config_path = tmp_path / 'run.cfg'
        config_path.write_text(SMALL_CONFIG, encoding='utf-8')
        out = tmp_path / 'out'
        code = reconstruct.main(['--config', str(config_path), '--out', str(out), '--no-progress'])
        assert code == reconstruct.EXIT_OK
        assert (out / METRICS_FILE).exists()
        assert (out / SUMMARY_FILE).exists()

    def test_seed_override(self, tmp_path):
        config_path = tmp_path / 'run.cfg'
        config_path.write_text(SMALL_CONFIG.replace('epochs=3', 'epochs=1'), encoding='utf-8')
        out = tmp_path / 'out'
        code = reconstruct.main(['--config', str(config_path), '--out', str(out),
                                 '--seed', '7', '--no-progress'])
        assert code == reconstruct.EXIT_OK
        summary = json.loads((out / SUMMARY_FILE).read_text(encoding='utf-8'))
        assert summary['config_values']['seed'] == 7

    def test_bad_config(self, tmp_path):
        config_path = tmp_path / 'bad.cfg'
        config_path.write_text('method=nope\n', encoding='utf-8')
        assert reconstruct.main(['--config', str(config_path)]) == reconstruct.EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        missing = tmp_path / 'missing.cfg'
        assert reconstruct.main(['--config', str(missing)]) == reconstruct.EXIT_CONFIG

    def test_latin1_config(self, tmp_path):
        config_path = tmp_path / 'latin1.cfg'
        config_path.write_bytes(b'method=firm\n# r\xe9sum\xe9 \xff\n')
        assert reconstruct.main(['--config', str(config_path)]) == reconstruct.EXIT_CONFIG

    def test_malformed_thread_count(self, tmp_path, monkeypatch):
        config_path = tmp_path / 'run.cfg'
        config_path.write_text(SMALL_CONFIG, encoding='utf-8')
        monkeypatch.setenv('FEDTUCKER_THREADS', 'abc')
        assert reconstruct.main(['--config', str(config_path)]) == reconstruct.EXIT_CONFIG


class TestCompareMethods:
    """Test variant derivation for the comparison runner"""

    def test_topk_matches_tucker_share(self):
        base = small_config()
        cfg = compare_methods.variant_config(base, 'firm_topk', seed=4)
        assert cfg.method == 'firm'
        assert cfg.seed == 4
        assert cfg.topk == pytest.approx(100.0 * 64 * (36 + 2 * 16 * 6) / (64 * 256), abs=1e-6)

    def test_topk_reference_rank_capped(self):
        base = ExperimentConfig().validate()
        cfg = compare_methods.variant_config(base, 'firm_topk', seed=0)
        rank = compare_methods.TOPK_REFERENCE_RANK
        assert rank == 10
        assert cfg.topk == pytest.approx(100.0 * (rank ** 2 + 2 * 64 * rank) / 64 ** 2, abs=1e-6)
        assert cfg.topk < 100.0

    def test_topk_clamped_when_tucker_does_not_compress(self, caplog):
        base = small_config(ranks=15)
        with caplog.at_level(logging.WARNING, logger='compare_methods'):
            cfg = compare_methods.variant_config(base, 'firm_topk', seed=0)
        assert cfg.topk == 100.0
        assert 'no compression' in caplog.text

    def test_hetero_variant(self):
        cfg = compare_methods.variant_config(small_config(), 'compjf_hetero_epoch', seed=0)
        assert cfg.hetero == 'per_epoch'

    def test_compare_frame(self):
        frame = compare_methods.compare(small_config(epochs=1), ['firm', 'compjf'], seeds=[0])
        assert list(frame['variant']) == ['firm', 'compjf']
        assert (frame['total_bits'] > 0).all()


if __name__ == "__main__":
    pytest.main([__file__, '-v'])
