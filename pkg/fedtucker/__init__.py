"""
fedtucker: federated multimodal tomographic reconstruction with
Tucker-compressed client/server exchange

Modules:
    tensor_core: Unfolding, tensor-times-matrix and Tucker reconstruction
    decomposition: Truncated SVD, HOSVD, ST-HOSVD and QR bases
    tomography: Radon operator, phantoms, noise and the data loss
    federation: Client steps, server aggregation schemes and the training loop
    compression: Bit accounting, Top-k, CSR codec and compression-ratio bounds
    metrics: PSNR, SSIM, GCE, discrepancy stopping and the metrics log
    pipeline: Experiment orchestration and output files
"""

__version__ = '1.0.0'

from .exceptions import (ConfigError, FedTuckerError, GeometryError, InvalidArgumentError,
                         MalformedBlobError, ModeIndexError, NonFiniteError, RankError,
                         ShapeMismatchError, UnsupportedConfigurationError)
from .tensor_core import TuckerFactors, concat_last, fold, ttm, tucker_reconstruct, unfold
from .decomposition import hosvd, orthonormal_basis_qr, project_to_rank, st_hosvd, truncated_svd
from .tomography import Geometry, RadonOperator, build_radon_operator, shepp_logan_phantom
from .compression import CommLedger, csr_decode, csr_encode, message_volume_bits, topk_sparsify
from .metrics import MetricsLog, gce, psnr, ssim
from .federation import FederatedReconstruction, run_epochs

__all__ = [
    'FedTuckerError',
    'ConfigError',
    'GeometryError',
    'InvalidArgumentError',
    'MalformedBlobError',
    'ModeIndexError',
    'NonFiniteError',
    'RankError',
    'ShapeMismatchError',
    'UnsupportedConfigurationError',
    'TuckerFactors',
    'unfold',
    'fold',
    'ttm',
    'tucker_reconstruct',
    'concat_last',
    'truncated_svd',
    'hosvd',
    'st_hosvd',
    'orthonormal_basis_qr',
    'project_to_rank',
    'Geometry',
    'RadonOperator',
    'build_radon_operator',
    'shepp_logan_phantom',
    'topk_sparsify',
    'csr_encode',
    'csr_decode',
    'message_volume_bits',
    'CommLedger',
    'psnr',
    'ssim',
    'gce',
    'MetricsLog',
    'FederatedReconstruction',
    'run_epochs',
]
