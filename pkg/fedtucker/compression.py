"""
Compression Module
Communication accounting, Top-k sparsification, CSR codec and the Tucker
compression-ratio formulas

Bit model: 64-bit values, 32-bit indices and row pointers, headers excluded.
"""

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy import sparse

from fedtucker.exceptions import InvalidArgumentError, MalformedBlobError, NonFiniteError, RankError
from fedtucker.tensor_core import TuckerFactors, flatten, from_flat

logger = logging.getLogger(__name__)

VALUE_BITS = 64
INDEX_BITS = 32
CSR_MAGIC = b'CSR1'
_CSR_HEADER = struct.Struct('<4sIIQ')


@dataclass
class SparseTensor:
    """Kept entries of a tensor: first-index-fastest linear indices and values"""

    shape: Tuple[int, ...]
    indices: np.ndarray
    values: np.ndarray

    @property
    def nnz(self):
        return int(np.count_nonzero(self.values))

    def to_dense(self):
        flat = np.zeros(int(np.prod(self.shape)))
        flat[self.indices] = self.values
        return from_flat(flat, self.shape)


def topk_sparsify(t, k) -> SparseTensor:
    """
    Keep the max(1, ceil(k/100 * numel)) entries of largest magnitude

    Ties go to the smaller linear index.

    Args:
        t: Tensor
        k: Percentage in (0, 100]

    Returns:
        SparseTensor with the kept entries, sorted by linear index
    """
    if not 0 < k <= 100:
        raise InvalidArgumentError(f"top-k percentage must lie in (0, 100], got {k}")
    t = np.asarray(t, dtype=np.float64)
    flat = flatten(t)
    # At least one entry for any positive k
    m = max(1, math.ceil(round(k * flat.size / 100.0, 9)))
    # Stable sort keeps lower indices first among equal magnitudes
    order = np.argsort(-np.abs(flat), kind='stable')[:m]
    kept = np.sort(order)
    return SparseTensor(shape=t.shape, indices=kept, values=flat[kept])


@dataclass
class CSRBlob:
    """Compressed sparse row payload"""

    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    shape: Tuple[int, int]

    @property
    def nnz(self):
        return int(self.data.size)

    @property
    def bits(self):
        return VALUE_BITS * self.nnz + INDEX_BITS * self.nnz + INDEX_BITS * (self.shape[0] + 1)

    def validate(self):
        """
        Check structural invariants

        Raises:
            MalformedBlobError: If any invariant is violated
        """
        rows, cols = self.shape
        if self.indptr.size != rows + 1:
            raise MalformedBlobError(f"indptr has {self.indptr.size} entries, expected {rows + 1}")
        if self.indices.size != self.data.size:
            raise MalformedBlobError("indices and data lengths differ")
        if self.indptr[0] != 0 or int(self.indptr[-1]) != self.data.size:
            raise MalformedBlobError("indptr must start at 0 and end at nnz")
        if np.any(np.diff(self.indptr.astype(np.int64)) < 0):
            raise MalformedBlobError("indptr must be non-decreasing")
        if self.indices.size and int(self.indices.max()) >= cols:
            raise MalformedBlobError("column index out of range")
        for r in range(rows):
            row = self.indices[self.indptr[r]:self.indptr[r + 1]].astype(np.int64)
            if np.any(np.diff(row) <= 0):
                raise MalformedBlobError(f"column indices of row {r} are not strictly increasing")
        if not np.all(np.isfinite(self.data)):
            raise MalformedBlobError("non-finite values in blob")

    def to_bytes(self):
        """Little-endian layout: magic, u32 rows, u32 cols, u64 nnz, indptr, indices, values"""
        header = _CSR_HEADER.pack(CSR_MAGIC, self.shape[0], self.shape[1], self.nnz)
        return b''.join([
            header,
            self.indptr.astype('<u4').tobytes(),
            self.indices.astype('<u4').tobytes(),
            self.data.astype('<f8').tobytes(),
        ])

    @classmethod
    def from_bytes(cls, payload: bytes):
        if len(payload) < _CSR_HEADER.size:
            raise MalformedBlobError("blob shorter than its header")
        magic, rows, cols, nnz = _CSR_HEADER.unpack_from(payload)
        if magic != CSR_MAGIC:
            raise MalformedBlobError(f"bad magic {magic!r}")
        expected = _CSR_HEADER.size + 4 * (rows + 1) + 4 * nnz + 8 * nnz
        if len(payload) != expected:
            raise MalformedBlobError(f"blob has {len(payload)} bytes, expected {expected}")
        offset = _CSR_HEADER.size
        indptr = np.frombuffer(payload, dtype='<u4', count=rows + 1, offset=offset)
        offset += 4 * (rows + 1)
        indices = np.frombuffer(payload, dtype='<u4', count=nnz, offset=offset)
        offset += 4 * nnz
        data = np.frombuffer(payload, dtype='<f8', count=nnz, offset=offset)
        blob = cls(indptr=indptr.astype(np.uint32), indices=indices.astype(np.uint32),
                   data=data.astype(np.float64), shape=(rows, cols))
        blob.validate()
        return blob


def _as_matrix(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim == 1:
        return m[None, :]
    if m.ndim > 2:
        # Higher-order tensors travel as their mode-0 rows
        return m.reshape((m.shape[0], -1), order='F')
    return m


def csr_encode(m) -> CSRBlob:
    """
    Encode a matrix (or a tensor's mode-0 rows) as CSR, dropping zeros

    Args:
        m: Matrix or tensor of finite values

    Returns:
        CSRBlob
    """
    m = _as_matrix(m)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("cannot CSR-encode non-finite values")
    csr = sparse.csr_matrix(m)
    csr.eliminate_zeros()
    csr.sort_indices()
    return CSRBlob(
        indptr=csr.indptr.astype(np.uint32),
        indices=csr.indices.astype(np.uint32),
        data=csr.data.astype(np.float64),
        shape=(int(m.shape[0]), int(m.shape[1])),
    )


def csr_decode(b: CSRBlob):
    """
    Decode a CSR blob to a dense matrix

    Args:
        b: CSRBlob

    Returns:
        Dense matrix of b.shape
    """
    b.validate()
    csr = sparse.csr_matrix(
        (b.data, b.indices.astype(np.int64), b.indptr.astype(np.int64)), shape=b.shape
    )
    return csr.toarray()


def tucker_bits(shape, ranks):
    """Bits for a Tucker message: 64 * (prod r_k + sum n_k r_k)"""
    elements = int(np.prod(ranks)) + sum(int(n) * int(r) for n, r in zip(shape, ranks))
    return VALUE_BITS * elements


def message_volume_bits(payload):
    """
    Communication volume of one payload

    Args:
        payload: Raw ndarray, TuckerFactors, CSRBlob or SparseTensor

    Returns:
        Bit count, headers excluded
    """
    if isinstance(payload, TuckerFactors):
        return tucker_bits(payload.shape, payload.ranks)
    if isinstance(payload, CSRBlob):
        return payload.bits
    if isinstance(payload, SparseTensor):
        return csr_encode(payload.to_dense()).bits
    if isinstance(payload, np.ndarray):
        return VALUE_BITS * int(payload.size)
    raise TypeError(f"unknown payload kind: {type(payload).__name__}")


def compression_ratio(n, d, r):
    """
    phi = n^d / (r^d + d n r)

    Args:
        n: Extent per mode
        d: Number of modes
        r: Tucker rank per mode, 1 <= r < n

    Returns:
        Compression ratio
    """
    if not 1 <= r < n:
        raise RankError(f"rank must satisfy 1 <= r < n, got r={r}, n={n}")
    return float(n) ** d / (float(r) ** d + d * n * r)


def compression_percentage(n, d, r):
    """Transmitted Tucker volume as a percentage of the full tensor"""
    return 100.0 * (r ** d + d * n * r) / n ** d


def tucker_fraction(shape, ranks):
    """
    Tucker message size as a fraction of the full tensor

    Matches a Tucker rank against a Top-k percentage: k = 100 * tucker_fraction.
    """
    return tucker_bits(shape, ranks) / (VALUE_BITS * int(np.prod(shape)))


def _largest_int_below(x):
    return max(math.ceil(x) - 1, 0)


def rank_upper_bound(n, d):
    """
    Largest Tucker ranks that still compress

    Args:
        n: Extent per mode, >= 3
        d: 2 or 3

    Returns:
        Tuple (ours, dai): the largest integer strictly below the improved bound,
        and the floor of n / (1 + d n)^(1/d)
    """
    if n < 3:
        raise RankError(f"n must be at least 3, got {n}")
    if d == 2:
        ours = _largest_int_below(n / (math.sqrt(2.0) + 1.0))
    elif d == 3:
        ours = _largest_int_below(n * ((n - 3) / n) ** (1.0 / 3.0))
    else:
        raise RankError(f"rank bound is only available for d in (2, 3), got {d}")
    dai = math.floor(n / (1 + d * n) ** (1.0 / d))
    return ours, dai


@dataclass
class CommLedger:
    """Per-epoch uplink/downlink bits with the running total"""

    uplink: List[int] = field(default_factory=list)
    downlink: List[int] = field(default_factory=list)
    cumulative: List[int] = field(default_factory=list)

    def record(self, uplink_bits, downlink_bits):
        if uplink_bits < 0 or downlink_bits < 0:
            raise InvalidArgumentError("bit counts must be non-negative")
        previous = self.cumulative[-1] if self.cumulative else 0
        self.uplink.append(int(uplink_bits))
        self.downlink.append(int(downlink_bits))
        self.cumulative.append(previous + int(uplink_bits) + int(downlink_bits))

    @property
    def volumes(self):
        """V_t per epoch, uplink and downlink combined"""
        return [u + d for u, d in zip(self.uplink, self.downlink)]

    @property
    def total(self):
        return self.cumulative[-1] if self.cumulative else 0
