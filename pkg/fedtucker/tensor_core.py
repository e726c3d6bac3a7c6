"""
Tensor Core Module
Dense tensor primitives: unfolding, folding, tensor-times-matrix, Tucker
reconstruction and concatenation

Tensors are float64 numpy arrays. Their linearization is first-index-fastest,
so every flatten/reshape here uses Fortran order. Mode indices are zero-based.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from fedtucker.exceptions import ModeIndexError, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOL = 1e-10


def as_tensor(values, name='tensor'):
    """
    Convert input to a finite float64 array

    Args:
        values: Array-like input
        name: Name used in error messages

    Returns:
        float64 numpy array

    Raises:
        NonFiniteError: If any value is NaN or infinite
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        raise ShapeMismatchError(f"{name} must have at least one mode")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} contains non-finite values")
    return arr


def flatten(t):
    """Linearize a tensor, first index fastest"""
    return np.asarray(t).ravel(order='F')


def from_flat(values, shape):
    """Inverse of flatten"""
    return np.asarray(values).reshape(tuple(shape), order='F')


def _check_mode(t, k):
    if not 0 <= k < t.ndim:
        raise ModeIndexError(f"mode {k} out of range for a {t.ndim}-way tensor")


def unfold(t, k):
    """
    Mode-k unfolding

    Rows index mode k. Columns run over the remaining modes in ascending
    order with the lower mode varying fastest.

    Args:
        t: Tensor of shape (n_0, ..., n_{d-1})
        k: Mode index

    Returns:
        Matrix of shape (n_k, prod of the other extents)
    """
    t = np.asarray(t, dtype=np.float64)
    _check_mode(t, k)
    return np.moveaxis(t, k, 0).reshape((t.shape[k], -1), order='F')


def fold(m, k, shape):
    """
    Inverse of unfold

    Args:
        m: Matrix produced by unfold(t, k)
        k: Mode index
        shape: Shape of the tensor to rebuild

    Returns:
        Tensor with the given shape
    """
    m = np.asarray(m, dtype=np.float64)
    shape = tuple(int(n) for n in shape)
    if not 0 <= k < len(shape):
        raise ModeIndexError(f"mode {k} out of range for a {len(shape)}-way shape")
    rest = int(np.prod([n for i, n in enumerate(shape) if i != k], dtype=np.int64))
    if m.ndim != 2 or m.shape != (shape[k], rest):
        raise ShapeMismatchError(
            f"cannot fold a {m.shape} matrix at mode {k} into shape {shape}"
        )
    moved = (shape[k],) + tuple(n for i, n in enumerate(shape) if i != k)
    return np.moveaxis(m.reshape(moved, order='F'), 0, k)


def ttm(t, s, k):
    """
    Tensor-times-matrix in mode k

    Contracts mode k of t with the rows of s:
    Y(..., j, ...) = sum_i X(..., i, ...) * S(i, j)

    Args:
        t: Tensor with n_k in mode k
        s: Matrix of shape (n_k, r)
        k: Mode index

    Returns:
        Tensor with r in mode k
    """
    t = np.asarray(t, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    _check_mode(t, k)
    if s.ndim != 2 or s.shape[0] != t.shape[k]:
        raise ShapeMismatchError(
            f"ttm mode {k}: matrix {s.shape} does not match extent {t.shape[k]}"
        )
    new_shape = list(t.shape)
    new_shape[k] = s.shape[1]
    return fold(s.T @ unfold(t, k), k, new_shape)


@dataclass
class TuckerFactors:
    """Core tensor with per-mode factor matrices of orthonormal columns"""

    core: np.ndarray
    factors: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.core = as_tensor(self.core, 'core')
        self.factors = [as_tensor(f, f'factor {k}') for k, f in enumerate(self.factors)]
        if len(self.factors) != self.core.ndim:
            raise ShapeMismatchError(
                f"{len(self.factors)} factors given for a {self.core.ndim}-way core"
            )
        for k, f in enumerate(self.factors):
            if f.ndim != 2 or f.shape[1] != self.core.shape[k]:
                raise ShapeMismatchError(
                    f"factor {k} has shape {f.shape}, core extent is {self.core.shape[k]}"
                )

    @property
    def ranks(self):
        return tuple(self.core.shape)

    @property
    def shape(self):
        return tuple(f.shape[0] for f in self.factors)

    def orthonormality_error(self):
        """Largest |S^T S - I| entry over all factors"""
        return max(
            (float(np.max(np.abs(f.T @ f - np.eye(f.shape[1])))) for f in self.factors),
            default=0.0,
        )

    def is_orthonormal(self, tol=ORTHONORMAL_TOL):
        return self.orthonormality_error() < tol


def tucker_reconstruct(f: TuckerFactors):
    """
    Rebuild the full tensor G x_1 S_1 ... x_d S_d

    Args:
        f: Tucker components

    Returns:
        Tensor of shape (n_0, ..., n_{d-1})
    """
    x = f.core
    for k, s in enumerate(f.factors):
        x = ttm(x, s.T, k)
    return x


def concat_last(ts: Sequence[np.ndarray]):
    """
    Stack same-shape tensors along a new trailing mode

    Args:
        ts: Non-empty sequence of tensors

    Returns:
        Tensor of shape (n_0, ..., n_{d-1}, N)
    """
    if len(ts) == 0:
        raise ShapeMismatchError("cannot concatenate an empty list of tensors")
    arrays = [np.asarray(t, dtype=np.float64) for t in ts]
    shape = arrays[0].shape
    for i, a in enumerate(arrays):
        if a.shape != shape:
            raise ShapeMismatchError(f"tensor {i} has shape {a.shape}, expected {shape}")
    return np.stack(arrays, axis=-1)
