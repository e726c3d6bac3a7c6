"""
Metrics Module
Reconstruction quality (PSNR, multiscale SSIM), communication efficiency (GCE),
the discrepancy-principle stopping rule and the per-epoch metrics log
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import signal

from fedtucker.exceptions import InvalidArgumentError, ShapeMismatchError

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)

METRICS_COLUMNS = [
    'epoch', 'client', 'loss', 'psnr', 'ssim',
    'uplink_bits', 'downlink_bits', 'cum_bits', 'stopped',
]


def _check_pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ShapeMismatchError(f"image shapes differ: {x.shape} vs {ref.shape}")
    return x, ref


def psnr(x, ref):
    """
    Peak signal-to-noise ratio in dB with peak = max(ref)

    Args:
        x: Reconstruction
        ref: Ground truth, not identically zero

    Returns:
        PSNR, math.inf for identical images
    """
    x, ref = _check_pair(x, ref)
    if not np.any(ref):
        raise InvalidArgumentError("PSNR reference image is identically zero")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(ref.max())
    return 10.0 * math.log10(peak ** 2 / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 2-D Gaussian window"""
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, window):
    # Fully contained windows only
    return signal.correlate2d(img, window, mode='valid')


def _ssim_terms(x, ref, c1, c2, window):
    mu_x = _filter_valid(x, window)
    mu_y = _filter_valid(ref, window)
    s_xx = _filter_valid(x * x, window) - mu_x * mu_x
    s_yy = _filter_valid(ref * ref, window) - mu_y * mu_y
    s_xy = _filter_valid(x * ref, window) - mu_x * mu_y
    luminance = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2.0 * s_xy + c2) / (s_xx + s_yy + c2)
    return luminance, cs


def _downsample(img):
    n1, n2 = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    img = img[:n1, :n2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def ssim(x, ref, scales=1):
    """
    Structural similarity, multiscale when scales > 1

    11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range
    max(ref) - min(ref) (1.0 for a constant reference). Scales use dyadic
    2x2 averaging and the standard five weights renormalized to the first
    `scales` entries.

    Args:
        x: Reconstruction
        ref: Ground truth
        scales: Number of scales, 1..5

    Returns:
        SSIM value
    """
    x, ref = _check_pair(x, ref)
    if not 1 <= scales <= len(MS_SSIM_WEIGHTS):
        raise InvalidArgumentError(f"scales must lie in [1, {len(MS_SSIM_WEIGHTS)}], got {scales}")
    min_side = 2 ** (scales - 1) * SSIM_WINDOW
    if min(x.shape) < min_side:
        raise InvalidArgumentError(f"images of shape {x.shape} are too small for {scales} scale(s)")

    dynamic_range = float(ref.max() - ref.min())
    if dynamic_range == 0.0:
        dynamic_range = 1.0
    c1 = (SSIM_K1 * dynamic_range) ** 2
    c2 = (SSIM_K2 * dynamic_range) ** 2
    window = gaussian_window()

    if scales == 1:
        luminance, cs = _ssim_terms(x, ref, c1, c2, window)
        return float(np.mean(luminance * cs))

    weights = np.array(MS_SSIM_WEIGHTS[:scales])
    weights = weights / weights.sum()
    value = 1.0
    for level in range(scales):
        luminance, cs = _ssim_terms(x, ref, c1, c2, window)
        if level < scales - 1:
            value *= max(float(np.mean(cs)), 0.0) ** weights[level]
            x, ref = _downsample(x), _downsample(ref)
        else:
            value *= max(float(np.mean(luminance * cs)), 0.0) ** weights[level]
    return float(value)


def gce(ssim_avg, volumes: Sequence[float], gamma=0.01):
    """
    Gamma communication efficiency: S / ((1 - S)^gamma * sum log2(V_t + 1))

    Args:
        ssim_avg: Client-averaged SSIM in [0, 1)
        volumes: Per-round volumes V_t in bits
        gamma: Accuracy exponent

    Returns:
        GCE (math.inf when ssim_avg is 1 or no volume was sent)
    """
    if not 0.0 <= ssim_avg <= 1.0:
        raise InvalidArgumentError(f"SSIM for GCE must lie in [0, 1], got {ssim_avg}")
    if any(v < 0 for v in volumes):
        raise InvalidArgumentError("communication volumes must be non-negative")
    if ssim_avg == 0.0:
        return 0.0
    if ssim_avg == 1.0:
        return math.inf
    cost = sum(math.log2(v + 1.0) for v in volumes)
    if cost == 0.0:
        return math.inf
    return ssim_avg / ((1.0 - ssim_avg) ** gamma * cost)


def discrepancy_threshold(sinogram, n_angles, n_beamlets, sigma):
    """max(B) * sqrt(theta * tau) * sigma"""
    return float(np.max(sinogram)) * math.sqrt(n_angles * n_beamlets) * sigma


def discrepancy_stop(residuals: Sequence[float], sinograms, n_angles, n_beamlets, sigma):
    """
    Discrepancy principle over all clients

    Args:
        residuals: Per-client data misfit ||A x X^i - B^i||_F
        sinograms: Observed B^i
        n_angles: Number of projection angles
        n_beamlets: Number of beamlets
        sigma: Noise standard deviation; <= 0 disables the rule

    Returns:
        True when every client's misfit is at or below its threshold
    """
    if sigma <= 0:
        return False
    if len(residuals) != len(sinograms):
        raise ShapeMismatchError(f"{len(residuals)} residuals for {len(sinograms)} sinograms")
    return all(
        f <= discrepancy_threshold(b, n_angles, n_beamlets, sigma)
        for f, b in zip(residuals, sinograms)
    )


@dataclass
class QualityReport:
    """Per-client PSNR/SSIM with client averages"""

    psnr: List[float]
    ssim: List[float]

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim))


def quality_report(images, truths, scales=1) -> QualityReport:
    """Score every client's image against its ground truth"""
    return QualityReport(
        psnr=[psnr(x, t) for x, t in zip(images, truths)],
        ssim=[ssim(x, t, scales) for x, t in zip(images, truths)],
    )


@dataclass
class MetricsLog:
    """
    Per-(epoch, client) metrics with run-level summary

    Attributes:
        rows: One dict per (epoch, client) with the METRICS_COLUMNS keys
        residuals: Multimodality constraint residual after each server round
        completions: Factor basis completions per epoch
        truths: Ground-truth images per client
        best_images: Reconstruction at each client's best-SSIM epoch
        best_values: Running best SSIM per client
        final_images: Reconstruction after the last epoch run
        volumes: Combined uplink+downlink bits per epoch (epochs >= 1)
    """

    n_clients: int
    gamma: float = 0.01
    rows: List[Dict] = field(default_factory=list)
    residuals: List[float] = field(default_factory=list)
    completions: List[int] = field(default_factory=list)
    truths: List[np.ndarray] = field(default_factory=list)
    best_images: Dict[int, np.ndarray] = field(default_factory=dict)
    best_values: Dict[int, float] = field(default_factory=dict)
    best_epochs: Dict[int, int] = field(default_factory=dict)
    final_images: List[np.ndarray] = field(default_factory=list)
    volumes: List[int] = field(default_factory=list)
    stop_epoch: Optional[int] = None

    def add_epoch(self, epoch, losses, report: QualityReport, uplink_bits, downlink_bits,
                  cum_bits, stopped, images):
        for client in range(self.n_clients):
            self.rows.append({
                'epoch': int(epoch),
                'client': client,
                'loss': float(losses[client]),
                'psnr': float(report.psnr[client]),
                'ssim': float(report.ssim[client]),
                'uplink_bits': int(uplink_bits),
                'downlink_bits': int(downlink_bits),
                'cum_bits': int(cum_bits),
                'stopped': int(bool(stopped)),
            })
            # Earliest epoch wins ties
            if client not in self.best_values or report.ssim[client] > self.best_values[client]:
                self.best_values[client] = float(report.ssim[client])
                self.best_epochs[client] = int(epoch)
                self.best_images[client] = np.array(images[client], copy=True)
        if epoch > 0:
            self.volumes.append(int(uplink_bits) + int(downlink_bits))
        self.final_images = [np.array(x, copy=True) for x in images]
        if stopped:
            self.stop_epoch = int(epoch)

    def to_frame(self):
        return pd.DataFrame(self.rows, columns=METRICS_COLUMNS)

    def best_ssim(self):
        """Best SSIM per client over all logged epochs"""
        return dict(self.best_values)

    def epoch_mean_ssim(self, epoch):
        frame = self.to_frame()
        return float(frame.loc[frame['epoch'] == epoch, 'ssim'].mean())

    @property
    def last_epoch(self):
        return max((row['epoch'] for row in self.rows), default=0)

    def summary(self):
        """
        Run-level results

        GCE uses the client-averaged SSIM at the early-stop epoch, or at the
        last epoch when the run did not stop early, and the volumes of all
        rounds up to that epoch.
        """
        gce_epoch = self.stop_epoch if self.stop_epoch is not None else self.last_epoch
        gce_ssim = self.epoch_mean_ssim(gce_epoch) if self.rows else 0.0
        volumes = self.volumes[:gce_epoch]
        best = self.best_ssim()
        return {
            'best_ssim': {str(c): v for c, v in best.items()},
            'best_ssim_epoch': {str(c): e for c, e in self.best_epochs.items()},
            'mean_best_ssim': float(np.mean(list(best.values()))) if best else 0.0,
            'stop_epoch': self.stop_epoch,
            'gce_epoch': gce_epoch,
            'gce_ssim': gce_ssim,
            'gce': gce(min(max(gce_ssim, 0.0), 1.0), volumes, self.gamma),
            'total_bits': int(sum(self.volumes)),
            'max_constraint_residual': max(self.residuals, default=0.0),
            'basis_completions': int(sum(self.completions)),
        }
