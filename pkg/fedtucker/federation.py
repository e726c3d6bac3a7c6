"""
Federation Module
Client projected-gradient steps, server aggregation schemes and the
federated training loop

Server schemes:
    firm: full-size images, FIRM constraint projection
    fulldecomp: rebuild full images, FIRM update, re-decompose per client
    compjf: joint factorization of the uplinked Tucker components
    comprandjf: randomized (sketch + QR) joint factorization
    compavg: factor averaging with pseudo-inverse core recomputation
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from fedtucker import compression
from fedtucker.decomposition import (leading_left_singular_vectors, numerical_rank,
                                     orthonormal_basis_qr, st_hosvd)
from fedtucker.exceptions import (NonFiniteError, RankError, ShapeMismatchError,
                                  UnsupportedConfigurationError)
from fedtucker.metrics import MetricsLog, discrepancy_stop, quality_report
from fedtucker.tensor_core import TuckerFactors, tucker_reconstruct, ttm, unfold
from fedtucker.tomography import (Geometry, RadonOperator, add_speckle_noise,
                                  build_radon_operator, estimate_step_size, forward_project,
                                  loss_gradient, loss_value, shepp_logan_phantom,
                                  synthesize_multimodal_truth, weighted_sum)

logger = logging.getLogger(__name__)

SHARED_FACTOR_METHODS = ('compjf', 'comprandjf', 'compavg')

# Substream purposes
_STREAM_TAGS = {'noise': 0, 'ranks': 1, 'sketch': 2, 'step': 3}


@dataclass
class ClientState:
    """One participant: its data, rank choice and current core (or image for FIRM)"""

    client_id: int
    modality: str
    coefficient: Optional[float]
    sinogram: np.ndarray
    ranks: Tuple[int, ...]
    core: np.ndarray
    operator: RadonOperator


@dataclass
class ServerState:
    """Factor matrices shared with the clients"""

    factors: List[np.ndarray]

    @property
    def ranks(self):
        return tuple(f.shape[1] for f in self.factors)


@dataclass
class UplinkMessage:
    """Tucker components a client sends after its local step"""

    client_id: int
    core: np.ndarray
    factors: List[np.ndarray]

    @property
    def tucker(self):
        return TuckerFactors(core=self.core, factors=self.factors)

    @property
    def ranks(self):
        return tuple(self.core.shape)


@dataclass
class DownlinkMessage:
    """
    Server reply for one round

    Attributes:
        factors: Shared factors (None when every client gets its own)
        cores: Per-client cores
        client_factors: Per-client factors (FullDecomp)
        completions: Basis columns filled in by deterministic completion
        residual: Multimodality constraint residual after the update
    """

    factors: Optional[List[np.ndarray]]
    cores: List[np.ndarray]
    client_factors: Optional[List[List[np.ndarray]]] = None
    completions: int = 0
    residual: float = 0.0


class RngStreams:
    """
    Counter-based random substreams keyed by (purpose, ...)

    Every draw comes from its own Philox generator derived from the master
    seed and the key, so results do not depend on execution order.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)

    def generator(self, purpose, *keys):
        spawn_key = (_STREAM_TAGS[purpose],) + tuple(int(k) for k in keys)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=spawn_key)
        return np.random.Generator(np.random.Philox(seq))


def merge_ranks(client_ranks: Sequence[Sequence[int]]):
    """
    Componentwise maximum of the client rank tuples

    Args:
        client_ranks: Non-empty list of rank tuples of equal length

    Returns:
        Merged rank tuple r*
    """
    if len(client_ranks) == 0:
        raise RankError("cannot merge an empty list of ranks")
    lengths = {len(r) for r in client_ranks}
    if len(lengths) != 1:
        raise ShapeMismatchError(f"rank tuples have different lengths: {sorted(lengths)}")
    return tuple(int(max(col)) for col in zip(*client_ranks))


def initial_factors(shape, ranks):
    """First r_k standard basis columns per mode"""
    return [np.eye(n, r) for n, r in zip(shape, ranks)]


def client_local_step(client: ClientState, server: ServerState, eta) -> UplinkMessage:
    """
    One projected-gradient step on the client

    Args:
        client: Client state with its current core
        server: Factors received from the server
        eta: Step size

    Returns:
        UplinkMessage with the ST-HOSVD of the updated image at the client's ranks
    """
    if len(server.factors) != client.core.ndim:
        raise ShapeMismatchError("server factors do not match the client core order")
    for k, s in enumerate(server.factors):
        if s.shape[1] != client.core.shape[k]:
            raise ShapeMismatchError(
                f"client {client.client_id}: factor {k} has {s.shape[1]} columns, "
                f"core extent is {client.core.shape[k]}"
            )
    x = tucker_reconstruct(TuckerFactors(core=client.core, factors=server.factors))
    grad = loss_gradient(client.operator, x, client.sinogram)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError(f"client {client.client_id}: non-finite gradient")
    decomposed = st_hosvd(x - eta * grad, client.ranks)
    return UplinkMessage(client_id=client.client_id, core=decomposed.core,
                         factors=decomposed.factors)


def _check_messages(msgs: Sequence[UplinkMessage], ranks):
    if len(msgs) == 0:
        raise ShapeMismatchError("no client messages")
    shape = tuple(f.shape[0] for f in msgs[0].factors)
    for msg in msgs:
        if tuple(f.shape[0] for f in msg.factors) != shape:
            raise ShapeMismatchError(f"client {msg.client_id} factors disagree on the tensor shape")
    if len(ranks) != len(shape) or any(not 1 <= r <= n for r, n in zip(ranks, shape)):
        raise RankError(f"server ranks {tuple(ranks)} invalid for shape {shape}")
    return shape


def joint_factorization(msgs: Sequence[UplinkMessage], ranks) -> Tuple[List[np.ndarray], int]:
    """
    Shared factors from the leading left singular vectors of
    Y_k = [S^1_k G^1_(k) ... S^N_k G^N_(k)]

    Args:
        msgs: Client uplinks
        ranks: Target ranks r*

    Returns:
        Tuple (factors, completions)
    """
    _check_messages(msgs, ranks)
    factors, completions = [], 0
    for k, r in enumerate(ranks):
        y = np.hstack([msg.factors[k] @ unfold(msg.core, k) for msg in msgs])
        u, completed = leading_left_singular_vectors(y, r)
        if completed:
            logger.warning(f"joint factorization mode {k}: rank of Y_k below {r}, "
                           f"completed {completed} column(s)")
        completions += completed
        factors.append(u)
    return factors, completions


def jf_server(msgs: Sequence[UplinkMessage], ranks) -> List[np.ndarray]:
    """Joint factorization on the server (deterministic SVD variant)"""
    return joint_factorization(msgs, ranks)[0]


def randomized_joint_factorization(msgs: Sequence[UplinkMessage], ranks, streams: RngStreams,
                                   epoch=0) -> Tuple[List[np.ndarray], int]:
    """
    Shared factors from Q of QR(sum_i S^i_k G^i_(k) Omega^i_k)

    Omega^i_k is Gaussian with prod_{j != k} r^i_j rows and r*_k columns, drawn
    from the substream (epoch, mode, client).

    Returns:
        Tuple (factors, completions)
    """
    _check_messages(msgs, ranks)
    factors, completions = [], 0
    for k, r in enumerate(ranks):
        y = np.zeros((msgs[0].factors[k].shape[0], r))
        for msg in msgs:
            g = unfold(msg.core, k)
            omega = streams.generator('sketch', epoch, k, msg.client_id).standard_normal((g.shape[1], r))
            y += msg.factors[k] @ (g @ omega)
        missing = r - numerical_rank(y)
        if missing > 0:
            logger.warning(f"randomized joint factorization mode {k}: completed {missing} column(s)")
            completions += missing
        factors.append(orthonormal_basis_qr(y))
    return factors, completions


def rjf_server(msgs: Sequence[UplinkMessage], ranks, streams: RngStreams, epoch=0) -> List[np.ndarray]:
    """Randomized joint factorization on the server"""
    return randomized_joint_factorization(msgs, ranks, streams, epoch)[0]


def recompute_cores(msgs: Sequence[UplinkMessage], new_factors) -> List[np.ndarray]:
    """
    Express each client's Tucker tensor in the new shared factors:
    G~^i = [[G^i; S_1^T S^i_1, ..., S_d^T S^i_d]]

    Args:
        msgs: Client uplinks
        new_factors: Shared factors S_k(t)

    Returns:
        Cores of shape r*
    """
    cores = []
    for msg in msgs:
        if len(msg.factors) != len(new_factors):
            raise ShapeMismatchError(f"client {msg.client_id}: factor count mismatch")
        core = msg.core
        for k, (s_new, s_hat) in enumerate(zip(new_factors, msg.factors)):
            if s_new.shape[0] != s_hat.shape[0]:
                raise ShapeMismatchError(f"client {msg.client_id}: mode {k} row count mismatch")
            core = ttm(core, s_hat.T @ s_new, k)
        cores.append(core)
    return cores


def _firm_update(arrays, coefficients):
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    if len(arrays) < 2:
        raise ShapeMismatchError("the FIRM update needs at least two clients")
    if len(coefficients) != len(arrays) - 1:
        raise ShapeMismatchError(f"{len(coefficients)} coefficients for {len(arrays)} clients")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ShapeMismatchError("FIRM update operands must share one shape")
    elements, transmission = arrays[:-1], arrays[-1]
    total = weighted_sum(elements, coefficients)
    gap = transmission - total
    updated = [x + (c / 2.0) * gap for c, x in zip(coefficients, elements)]
    updated.append((transmission + total) / 2.0)
    return updated


def firm_core_update(cores, coefficients) -> List[np.ndarray]:
    """
    FIRM constraint update applied to cores (XRT client last)

    G^i <- G~^i + (c_i/2)(G~^N - sum), G^N <- (G~^N + sum)/2
    """
    return _firm_update(cores, coefficients)


def firm_tensor_update(tensors, coefficients) -> List[np.ndarray]:
    """FIRM constraint update applied to full images (XRT client last)"""
    return _firm_update(tensors, coefficients)


def constraint_residual(arrays, coefficients):
    """||X^N - sum_j c_j X^j||_F"""
    return float(np.linalg.norm(arrays[-1] - weighted_sum(arrays[:-1], coefficients)))


def joint_round(msgs, ranks, coefficients, randomized=False, streams=None, epoch=0) -> DownlinkMessage:
    """CompJF / CompRandJF server round: shared factors, recomputed and FIRM-updated cores"""
    if randomized:
        factors, completions = randomized_joint_factorization(msgs, ranks, streams, epoch)
    else:
        factors, completions = joint_factorization(msgs, ranks)
    cores = firm_core_update(recompute_cores(msgs, factors), coefficients)
    return DownlinkMessage(factors=factors, cores=cores, completions=completions,
                           residual=constraint_residual(cores, coefficients))


def full_decomp_round(msgs, client_ranks, coefficients) -> DownlinkMessage:
    """
    FullDecomp server round

    Rebuilds every full image, applies the FIRM update and re-decomposes each
    result at its client's ranks. Factors are per client.
    """
    images = [tucker_reconstruct(msg.tucker) for msg in msgs]
    updated = firm_tensor_update(images, coefficients)
    residual = constraint_residual(updated, coefficients)
    decomposed = [st_hosvd(x, r) for x, r in zip(updated, client_ranks)]
    return DownlinkMessage(
        factors=None,
        cores=[d.core for d in decomposed],
        client_factors=[d.factors for d in decomposed],
        residual=residual,
    )


def comp_avg_round(msgs, coefficients) -> DownlinkMessage:
    """
    CompAVG server round: factors averaged across clients

    The averaged factors are not orthonormal, so cores are recomputed with
    the pseudo-inverse in place of the transpose.
    """
    if len({msg.ranks for msg in msgs}) != 1:
        raise UnsupportedConfigurationError("compavg requires homogeneous client ranks")
    d = len(msgs[0].factors)
    factors = [np.mean([msg.factors[k] for msg in msgs], axis=0) for k in range(d)]
    pinvs = [np.linalg.pinv(s) for s in factors]
    cores = []
    for msg in msgs:
        core = msg.core
        for k, (p, s_hat) in enumerate(zip(pinvs, msg.factors)):
            core = ttm(core, (p @ s_hat).T, k)
        cores.append(core)
    cores = firm_core_update(cores, coefficients)
    return DownlinkMessage(factors=factors, cores=cores,
                           residual=constraint_residual(cores, coefficients))


def firm_payload(image, topk=None, encoding='raw'):
    """
    What actually travels for one full-size FIRM image

    Returns:
        Tuple (received image, bits)
    """
    if topk is not None:
        sparse_image = compression.topk_sparsify(image, topk)
        received = sparse_image.to_dense()
        return received, compression.message_volume_bits(sparse_image)
    if encoding == 'csr':
        blob = compression.csr_encode(image)
        return compression.csr_decode(blob).reshape(image.shape), compression.message_volume_bits(blob)
    return image, compression.message_volume_bits(np.asarray(image))


class FederatedReconstruction:
    """Runs the federated loop for one experiment configuration"""

    def __init__(self, cfg, threads=1, show_progress=False):
        self.cfg = cfg
        self.threads = max(int(threads or 1), 1)
        self.show_progress = show_progress
        self.streams = RngStreams(cfg.seed)
        self.coefficients = list(cfg.element_coefficients)
        self.shape = tuple(cfg.grid)
        self.operator = None
        self.truth = None
        self.clients: List[ClientState] = []
        self.eta = None
        self.ledger = compression.CommLedger()

        if cfg.method not in ('firm', 'fulldecomp') + SHARED_FACTOR_METHODS:
            raise UnsupportedConfigurationError(f"unknown method {cfg.method!r}")
        if cfg.method == 'compavg' and cfg.hetero != 'none':
            raise UnsupportedConfigurationError("compavg requires homogeneous client ranks")

    def setup(self):
        """Build geometry, data and the initial client states"""
        cfg = self.cfg
        if abs(sum(c * c for c in self.coefficients) - 1.0) > 1e-12:
            logger.warning("coefficients do not satisfy sum c_j^2 = 1; the FIRM update "
                           "will only approximately enforce the constraint")

        geometry = Geometry(n_angles=cfg.angles, n_beamlets=cfg.beamlets, grid=self.shape)
        self.operator = build_radon_operator(geometry)
        phantom = shepp_logan_phantom(*self.shape)
        self.truth = synthesize_multimodal_truth(phantom, cfg.clients - 1, self.coefficients)
        if cfg.lr is not None:
            self.eta = cfg.lr
        else:
            self.eta = estimate_step_size(self.operator, rng=self.streams.generator('step'))
        logger.info(f"Step size eta = {self.eta:.6g}")

        ranks = self.sample_ranks(0)
        self.clients = []
        for i, x in enumerate(self.truth.images):
            clean = forward_project(self.operator, x)
            sinogram = add_speckle_noise(clean, cfg.noise, self.streams.generator('noise', i))
            is_xrt = i == cfg.clients - 1
            self.clients.append(ClientState(
                client_id=i,
                modality='xrt' if is_xrt else 'xrf',
                coefficient=None if is_xrt else self.coefficients[i],
                sinogram=sinogram,
                ranks=ranks[i],
                core=np.zeros(self.shape),
                operator=self.operator,
            ))
        return self

    def sample_ranks(self, epoch):
        """Rank tuple per client for this epoch"""
        cfg = self.cfg
        d = len(self.shape)
        if cfg.hetero == 'none':
            return [(r,) * d for r in cfg.client_ranks()]
        if cfg.hetero == 'fixed':
            epoch = 0
        lo, hi = cfg.rank_range
        ranks = []
        for i in range(cfg.clients):
            r = int(self.streams.generator('ranks', epoch, i).integers(lo, hi + 1))
            ranks.append((r,) * d)
        return ranks

    def _map_clients(self, fn, items):
        if self.threads == 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    def _record(self, log, epoch, images, uplink_bits, downlink_bits):
        losses = [loss_value(self.operator, x, c.sinogram) for x, c in zip(images, self.clients)]
        report = quality_report(images, self.truth.images, self.cfg.ssim_scales)
        stopped = False
        if epoch > 0:
            self.ledger.record(uplink_bits, downlink_bits)
            if self.cfg.early_stop:
                stopped = discrepancy_stop(
                    [math.sqrt(f) for f in losses], [c.sinogram for c in self.clients],
                    self.cfg.angles, self.cfg.beamlets, self.cfg.noise,
                )
        log.add_epoch(epoch, losses, report, uplink_bits, downlink_bits,
                      self.ledger.total, stopped, images)
        logger.debug(f"epoch {epoch}: mean ssim {report.mean_ssim:.4f}, "
                     f"loss {sum(losses):.6g}, bits {uplink_bits + downlink_bits}")
        return stopped

    def run(self) -> MetricsLog:
        """
        Execute the configured number of epochs

        Returns:
            MetricsLog with one row per (epoch, client)
        """
        if not self.clients:
            self.setup()
        cfg = self.cfg
        log = MetricsLog(n_clients=cfg.clients, gamma=cfg.gamma,
                         truths=[np.array(x) for x in self.truth.images])
        logger.info(f"Starting federated reconstruction: method={cfg.method}, "
                    f"clients={cfg.clients}, epochs={cfg.epochs}")
        if cfg.method == 'firm':
            return self._run_firm(log)
        return self._run_tucker(log)

    def _epochs(self):
        return tqdm(range(1, self.cfg.epochs + 1), desc=self.cfg.method,
                    disable=not self.show_progress)

    def _run_firm(self, log):
        cfg = self.cfg
        images = [np.zeros(self.shape) for _ in self.clients]
        self._record(log, 0, images, 0, 0)

        def local_step(pair):
            client, x = pair
            grad = loss_gradient(self.operator, x, client.sinogram)
            if not np.all(np.isfinite(grad)):
                raise NonFiniteError(f"client {client.client_id}: non-finite gradient")
            return firm_payload(x - self.eta * grad, cfg.topk, cfg.encoding)

        for epoch in self._epochs():
            sent = self._map_clients(local_step, list(zip(self.clients, images)))
            uplink_bits = sum(bits for _, bits in sent)
            updated = firm_tensor_update([x for x, _ in sent], self.coefficients)
            log.residuals.append(constraint_residual(updated, self.coefficients))
            log.completions.append(0)
            returned = [firm_payload(x, cfg.topk, cfg.encoding) for x in updated]
            downlink_bits = sum(bits for _, bits in returned)
            images = [x for x, _ in returned]
            if self._record(log, epoch, images, uplink_bits, downlink_bits):
                logger.info(f"Discrepancy principle satisfied at epoch {epoch}")
                break
        return log

    def _run_tucker(self, log):
        cfg = self.cfg
        ranks = [c.ranks for c in self.clients]
        if cfg.method == 'fulldecomp':
            servers = [ServerState(initial_factors(self.shape, r)) for r in ranks]
            for client, r in zip(self.clients, ranks):
                client.core = np.zeros(r)
        else:
            merged = merge_ranks(ranks)
            servers = [ServerState(initial_factors(self.shape, merged))] * len(self.clients)
            for client in self.clients:
                client.core = np.zeros(merged)

        images = [tucker_reconstruct(TuckerFactors(c.core, s.factors))
                  for c, s in zip(self.clients, servers)]
        self._record(log, 0, images, 0, 0)

        for epoch in self._epochs():
            if cfg.hetero == 'per_epoch':
                for client, r in zip(self.clients, self.sample_ranks(epoch)):
                    client.ranks = r
            msgs = self._map_clients(
                lambda pair: client_local_step(pair[0], pair[1], self.eta),
                list(zip(self.clients, servers)),
            )
            uplink_bits = sum(compression.message_volume_bits(m.tucker) for m in msgs)
            reply = self._server_round(msgs, epoch)

            if reply.client_factors is not None:
                servers = [ServerState(f) for f in reply.client_factors]
            else:
                servers = [ServerState(reply.factors)] * len(self.clients)
            for client, core in zip(self.clients, reply.cores):
                client.core = core
            downlink_bits = sum(
                compression.message_volume_bits(TuckerFactors(c.core, s.factors))
                for c, s in zip(self.clients, servers)
            )
            log.residuals.append(reply.residual)
            log.completions.append(reply.completions)

            images = [tucker_reconstruct(TuckerFactors(c.core, s.factors))
                      for c, s in zip(self.clients, servers)]
            if self._record(log, epoch, images, uplink_bits, downlink_bits):
                logger.info(f"Discrepancy principle satisfied at epoch {epoch}")
                break
        return log

    def _server_round(self, msgs, epoch):
        method = self.cfg.method
        if method == 'fulldecomp':
            return full_decomp_round(msgs, [c.ranks for c in self.clients], self.coefficients)
        if method == 'compavg':
            return comp_avg_round(msgs, self.coefficients)
        merged = merge_ranks([m.ranks for m in msgs])
        return joint_round(msgs, merged, self.coefficients,
                           randomized=method == 'comprandjf', streams=self.streams, epoch=epoch)


def run_epochs(cfg, threads=1, show_progress=False) -> MetricsLog:
    """
    Convenience function to run one configured federation

    Args:
        cfg: ExperimentConfig
        threads: Worker threads for client steps
        show_progress: Show a tqdm progress bar

    Returns:
        MetricsLog
    """
    engine = FederatedReconstruction(cfg, threads=threads, show_progress=show_progress)
    return engine.setup().run()
