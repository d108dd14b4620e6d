"""Dense SVD, the tensor-train format, and the TT-SVD sweep.

A d-dimensional array A is stored as a chain of 3-dimensional cores
G_k of shape (r_{k-1}, n_k, r_k) with r_0 = r_d = 1, so that

    A[i_1, ..., i_d] = G_1[:, i_1, :] @ G_2[:, i_2, :] @ ... @ G_d[:, i_d, :]

All decomposition math runs in float64; cores are cast back to the input
dtype on return.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Relative floor below which singular values are treated as numerical zero.
_SV_FLOOR = 1e-14


def svd(matrix: np.ndarray):
    """Thin SVD with a deterministic sign convention.

    Returns (U, s, V) with matrix == U @ diag(s) @ V.T.  The largest-magnitude
    entry of each right singular vector is made positive, so truncation points
    do not depend on LAPACK's arbitrary sign choices.
    """
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"svd expects a matrix, got {m.ndim} dims")
    if not np.all(np.isfinite(m)):
        raise ValueError("svd input contains non-finite entries")
    u, s, vt = np.linalg.svd(m, full_matrices=False)
    for k in range(vt.shape[0]):
        j = int(np.argmax(np.abs(vt[k])))
        if vt[k, j] < 0:
            vt[k] = -vt[k]
            u[:, k] = -u[:, k]
    return u, s, vt.T


@dataclass(frozen=True)
class TTFormat:
    """A tensor in TT form: 3-dim cores with matching rank chain."""

    cores: tuple

    def __post_init__(self):
        if not self.cores:
            raise ValueError("TTFormat needs at least one core")
        object.__setattr__(self, "cores", tuple(np.asarray(c) for c in self.cores))
        for k, core in enumerate(self.cores):
            if core.ndim != 3:
                raise ValueError(f"core {k} is {core.ndim}-dimensional, expected 3")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
            raise ValueError("boundary ranks must be 1")
        for k in range(len(self.cores) - 1):
            if self.cores[k].shape[2] != self.cores[k + 1].shape[0]:
                raise ValueError(
                    f"rank mismatch between cores {k} and {k + 1}: "
                    f"{self.cores[k].shape[2]} vs {self.cores[k + 1].shape[0]}"
                )

    @property
    def dims(self) -> tuple:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple:
        return (1,) + tuple(c.shape[2] for c in self.cores)


def tt_svd(tensor: np.ndarray, max_ranks: Sequence[int] | None = None,
           eps: float | None = None) -> TTFormat:
    """Factorize a dense tensor into TT form by sequential SVD of unfoldings.

    max_ranks caps each of the d-1 internal ranks; eps bounds the relative
    Frobenius reconstruction error (per-unfolding budget eps/sqrt(d-1), so
    the eps-only guarantee is sqrt(d-1)*eps overall).  When both are given,
    the smaller rank implied by either criterion wins.
    """
    a = np.asarray(tensor)
    in_dtype = a.dtype
    a = a.astype(np.float64)
    d = a.ndim
    if d < 2:
        raise ValueError("tt_svd needs a tensor with at least 2 dims")
    if max_ranks is None and eps is None:
        raise ValueError("provide max_ranks and/or eps")
    if max_ranks is not None:
        max_ranks = list(max_ranks)
        if len(max_ranks) != d - 1:
            raise ValueError(f"max_ranks has {len(max_ranks)} entries, expected {d - 1}")
        if any(r < 1 for r in max_ranks):
            raise ValueError("max_ranks entries must be >= 1")

    norm = np.linalg.norm(a)
    if norm == 0.0:
        # Degenerate but valid: unit ranks, all-zero cores.
        cores = [np.zeros((1, n, 1), dtype=in_dtype) for n in a.shape]
        return TTFormat(tuple(cores))

    delta2 = None
    if eps is not None:
        delta = eps * norm / np.sqrt(d - 1)
        delta2 = delta * delta

    dims = a.shape
    cores = []
    r_prev = 1
    c = a
    for k in range(d - 1):
        c = c.reshape(r_prev * dims[k], -1)
        u, s, v = svd(c)
        r = _choose_rank(s, delta2)
        if max_ranks is not None:
            r = min(r, max_ranks[k])
        cores.append(u[:, :r].reshape(r_prev, dims[k], r))
        c = s[:r, None] * v[:, :r].T
        r_prev = r
    cores.append(c.reshape(r_prev, dims[-1], 1))

    if in_dtype != np.float64:
        cores = [core.astype(in_dtype) for core in cores]
    return TTFormat(tuple(cores))


def _choose_rank(s: np.ndarray, delta2: float | None) -> int:
    """Smallest kept rank honoring the error budget; numerical zeros dropped."""
    floor = s[0] * _SV_FLOOR if s.size else 0.0
    r = int(np.count_nonzero(s > floor))
    if delta2 is not None:
        tail = 0.0
        while r > 1 and tail + s[r - 1] * s[r - 1] <= delta2:
            tail += s[r - 1] * s[r - 1]
            r -= 1
    return max(r, 1)


def tt_reconstruct(tt: TTFormat) -> np.ndarray:
    """Materialize the full tensor from its cores."""
    acc = tt.cores[0][0]  # (n_1, r_1)
    for core in tt.cores[1:]:
        acc = np.tensordot(acc, core, axes=([acc.ndim - 1], [0]))
    return acc[..., 0]


def tt_element(tt: TTFormat, index: Sequence[int]) -> float:
    """Single element via the chain product, without materializing the tensor."""
    dims = tt.dims
    if len(index) != len(dims):
        raise IndexError(f"index has {len(index)} entries, tensor has {len(dims)} dims")
    for i, n in zip(index, dims):
        if not 0 <= i < n:
            raise IndexError(f"index {tuple(index)} out of range for dims {dims}")
    v = tt.cores[0][:, index[0], :]
    for core, i in zip(tt.cores[1:], index[1:]):
        v = v @ core[:, i, :]
    return float(v[0, 0])


def tt_param_count(tt: TTFormat) -> int:
    """Total core entries: sum_k r_{k-1} * n_k * r_k."""
    return sum(c.size for c in tt.cores)


def pair_indices(tensor: np.ndarray, row_dims: Sequence[int],
                 col_dims: Sequence[int]) -> np.ndarray:
    """Reshape a (prod(row_dims), prod(col_dims)) matrix into the paired-mode
    tensor whose k-th mode combines (i_k, j_k) into one index of extent
    row_dims[k]*col_dims[k], i_k major."""
    t = np.asarray(tensor)
    row_dims, col_dims = list(row_dims), list(col_dims)
    if len(row_dims) != len(col_dims):
        raise ValueError("row_dims and col_dims must have equal length")
    if int(np.prod(row_dims)) * int(np.prod(col_dims)) != t.size:
        raise ValueError(
            f"factorizations {row_dims} x {col_dims} do not cover {t.size} elements"
        )
    d = len(row_dims)
    t = t.reshape(tuple(row_dims) + tuple(col_dims))
    perm = [ax for k in range(d) for ax in (k, d + k)]
    t = t.transpose(perm)
    return t.reshape(tuple(r * c for r, c in zip(row_dims, col_dims)))


def unpair_indices(paired: np.ndarray, row_dims: Sequence[int],
                   col_dims: Sequence[int]) -> np.ndarray:
    """Inverse of pair_indices; returns the (prod(row_dims), prod(col_dims)) matrix."""
    t = np.asarray(paired)
    row_dims, col_dims = list(row_dims), list(col_dims)
    if len(row_dims) != len(col_dims):
        raise ValueError("row_dims and col_dims must have equal length")
    expected = tuple(r * c for r, c in zip(row_dims, col_dims))
    if t.shape != expected:
        raise ValueError(f"paired tensor has shape {t.shape}, expected {expected}")
    d = len(row_dims)
    split = [s for r, c in zip(row_dims, col_dims) for s in (r, c)]
    t = t.reshape(split)
    perm = [2 * k for k in range(d)] + [2 * k + 1 for k in range(d)]
    t = t.transpose(perm)
    return t.reshape(int(np.prod(row_dims)), int(np.prod(col_dims)))
