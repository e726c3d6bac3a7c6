"""
Decomposition Module
Truncated SVD, HOSVD, ST-HOSVD, QR orthonormalization and low-rank projection
"""

import logging
from typing import Sequence, Tuple

import numpy as np
from scipy import linalg

from fedtucker.exceptions import NonFiniteError, RankError, ShapeMismatchError
from fedtucker.tensor_core import TuckerFactors, as_tensor, tucker_reconstruct, ttm, unfold

logger = logging.getLogger(__name__)

# Relative to the largest singular value
RANK_TOL = 1e-8


def validate_ranks(shape, ranks):
    """
    Check a rank tuple against a tensor shape

    Args:
        shape: Tensor extents (n_0, ..., n_{d-1})
        ranks: Requested ranks (r_0, ..., r_{d-1})

    Returns:
        Ranks as a tuple of ints

    Raises:
        RankError: If the tuple length or any rank is out of range
    """
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(shape):
        raise RankError(f"rank tuple {ranks} does not match {len(shape)}-way shape {tuple(shape)}")
    for k, (r, n) in enumerate(zip(ranks, shape)):
        if not 1 <= r <= n:
            raise RankError(f"rank {r} for mode {k} must lie in [1, {n}]")
    return ranks


def _fix_signs(u, vt):
    # Largest-magnitude entry of every left singular vector is non-negative
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    return u * signs, vt * signs[:, None]


def truncated_svd(m, r):
    """
    Rank-r truncated singular value decomposition

    Args:
        m: Matrix of shape (rows, cols)
        r: Number of singular triplets to keep, 1 <= r <= min(rows, cols)

    Returns:
        Tuple (U, s, V) with U (rows x r), s (r,), V (cols x r)
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeMismatchError(f"expected a matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix contains non-finite values")
    if not 1 <= r <= min(m.shape):
        raise RankError(f"rank {r} out of range for a {m.shape} matrix")

    u, s, vt = linalg.svd(m, full_matrices=False, lapack_driver='gesdd')
    u, vt = _fix_signs(u, vt)
    return u[:, :r], s[:r], vt[:r].T


def numerical_rank(m, tol=RANK_TOL):
    """Number of singular values above tol relative to the largest one"""
    s = linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def complete_basis(q, r):
    """
    Extend orthonormal columns to r columns

    Standard basis vectors are orthogonalized against the current columns in
    index order; vectors already (numerically) in the span are skipped.

    Args:
        q: Matrix (n x m) with orthonormal columns, m <= r
        r: Target column count, r <= n

    Returns:
        Matrix (n x r) with orthonormal columns whose first m columns are q
    """
    q = np.asarray(q, dtype=np.float64)
    n = q.shape[0]
    if r > n:
        raise RankError(f"cannot build {r} orthonormal columns in dimension {n}")
    columns = [q[:, j] for j in range(q.shape[1])]
    for i in range(n):
        if len(columns) >= r:
            break
        v = np.zeros(n)
        v[i] = 1.0
        # Two Gram-Schmidt passes
        for _ in range(2):
            for c in columns:
                v -= (c @ v) * c
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            columns.append(v / norm)
    if not columns:
        return np.zeros((n, 0))
    return np.column_stack(columns[:r])


def leading_left_singular_vectors(m, r) -> Tuple[np.ndarray, int]:
    """
    r leading left singular vectors, completed when the matrix has lower rank

    Args:
        m: Matrix (rows x cols)
        r: Number of vectors, 1 <= r <= rows

    Returns:
        Tuple (U, completed) where U is rows x r orthonormal and completed is the
        number of columns that had to be filled in by basis completion
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix contains non-finite values")
    if not 1 <= r <= m.shape[0]:
        raise RankError(f"cannot take {r} left singular vectors of a {m.shape} matrix")

    if min(m.shape) == 0:
        return complete_basis(np.zeros((m.shape[0], 0)), r), r

    u, s, vt = linalg.svd(m, full_matrices=False, lapack_driver='gesdd')
    u, _ = _fix_signs(u, vt)
    rank = 0 if s[0] == 0.0 else int(np.sum(s > RANK_TOL * s[0]))
    keep = min(r, rank)
    if keep == r:
        return u[:, :r], 0
    return complete_basis(u[:, :keep], r), r - keep


def hosvd(t, ranks: Sequence[int]) -> TuckerFactors:
    """
    Truncated higher-order SVD

    Args:
        t: Tensor
        ranks: Target multilinear rank

    Returns:
        TuckerFactors with factor k the leading left singular vectors of the
        mode-k unfolding of t
    """
    t = as_tensor(t)
    ranks = validate_ranks(t.shape, ranks)
    factors = []
    for k, r in enumerate(ranks):
        u, _ = leading_left_singular_vectors(unfold(t, k), r)
        factors.append(u)
    core = t
    for k, u in enumerate(factors):
        core = ttm(core, u, k)
    return TuckerFactors(core=core, factors=factors)


def st_hosvd(t, ranks: Sequence[int]) -> TuckerFactors:
    """
    Sequentially truncated HOSVD

    Modes are processed in ascending order; the working tensor is compressed
    in each mode right after its factor is found.

    Args:
        t: Tensor
        ranks: Target multilinear rank

    Returns:
        TuckerFactors of t
    """
    t = as_tensor(t)
    ranks = validate_ranks(t.shape, ranks)
    work = t
    factors = []
    for k, r in enumerate(ranks):
        u, completed = leading_left_singular_vectors(unfold(work, k), r)
        if completed:
            logger.debug(f"st_hosvd mode {k}: completed {completed} basis column(s)")
        factors.append(u)
        work = ttm(work, u, k)
    return TuckerFactors(core=work, factors=factors)


def orthonormal_basis_qr(m):
    """
    Orthonormal basis of a matrix's column space via pivoted QR

    Rank-deficient inputs are completed with standard basis vectors so the
    result always has as many orthonormal columns as m.

    Args:
        m: Matrix with rows >= cols

    Returns:
        Q (rows x cols), Q^T Q = I
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < m.shape[1]:
        raise ShapeMismatchError(f"QR basis needs rows >= cols, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("matrix contains non-finite values")

    q, r, _ = linalg.qr(m, mode='economic', pivoting=True)
    diag = np.abs(np.diag(r))
    rank = 0 if diag.size == 0 or diag[0] == 0.0 else int(np.sum(diag > RANK_TOL * diag[0]))
    signs = np.where(np.diag(r)[:rank] < 0, -1.0, 1.0)
    q = q[:, :rank] * signs
    if rank < m.shape[1]:
        logger.debug(f"QR basis: rank {rank} < {m.shape[1]}, completing")
        q = complete_basis(q, m.shape[1])
    return q


def project_to_rank(t, ranks: Sequence[int]):
    """
    Project a tensor onto multilinear rank <= ranks with ST-HOSVD

    Args:
        t: Tensor
        ranks: Rank bound per mode

    Returns:
        Projected tensor of the same shape
    """
    return tucker_reconstruct(st_hosvd(t, ranks))
