"""Linear-algebra and regression primitives shared by every other module."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels


class CorruptCodeError(ValueError):
    """A sparse code refers to a feature outside the dictionary it is decoded with."""


class UndefinedCorrelationError(ValueError):
    """Correlation requested for data with zero variance."""


class FormatError(ValueError):
    """A checkpoint or shard file is malformed."""


@dataclass(frozen=True)
class SparseCodeBatch:
    """Per-sample top-k activations: ``indices`` and ``values`` are both (n_samples, k)."""

    indices: np.ndarray
    values: np.ndarray
    dim: int

    @property
    def n_samples(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def validate(self) -> None:
        if self.indices.shape != self.values.shape or self.indices.ndim != 2:
            raise CorruptCodeError("indices and values must share a (n_samples, k) shape")
        if self.k and (self.indices.min() < 0 or self.indices.max() >= self.dim):
            raise CorruptCodeError(f"feature index out of range for dim={self.dim}")
        if self.k > 1 and np.any(np.diff(self.indices, axis=1) <= 0):
            raise CorruptCodeError("indices must be strictly increasing within a sample")
        if not np.all(np.isfinite(self.values)):
            raise CorruptCodeError("non-finite activation value")

    def to_dense(self) -> np.ndarray:
        z = np.zeros((self.n_samples, self.dim))
        np.put_along_axis(z, self.indices, self.values, axis=1)
        return z

    def __getitem__(self, rows) -> "SparseCodeBatch":
        return SparseCodeBatch(self.indices[rows], self.values[rows], self.dim)


@dataclass(frozen=True)
class RegressionFit:
    slope: float
    intercept: float
    r2: float


def topk_select(pre_activation, k: int) -> SparseCodeBatch:
    """Keep the ``k`` largest values of each row.

    Accepts a single vector or a (batch, n) matrix. Ties go to the lower
    index and the returned indices are ascending.
    """
    p = np.asarray(pre_activation, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if p.ndim != 2:
        raise ValueError("pre_activation must be a vector or a matrix")
    if k < 0 or k > p.shape[1]:
        raise ValueError(f"k={k} must lie in [0, {p.shape[1]}]")
    if not np.all(np.isfinite(p)):
        raise ValueError("pre_activation contains non-finite entries")
    idx, vals = _kernels.topk_rows(p, k)
    return SparseCodeBatch(idx, vals, p.shape[1])


def sparse_decode_matmul(codes: SparseCodeBatch, dictionary) -> np.ndarray:
    """Row ``i`` is ``sum_j values[i, j] * dictionary[indices[i, j]]``; O(n_samples * k * D)."""
    dictionary = np.asarray(dictionary)
    if dictionary.ndim != 2:
        raise ValueError("dictionary must be a matrix")
    if codes.dim != dictionary.shape[0]:
        raise CorruptCodeError(f"codes have dim {codes.dim}, dictionary has {dictionary.shape[0]} rows")
    if codes.k and (codes.indices.max() >= dictionary.shape[0] or codes.indices.min() < 0):
        raise CorruptCodeError(f"feature index out of range for a {dictionary.shape[0]}-row dictionary")
    return _kernels.sparse_decode(codes.indices, codes.values, dictionary)


def sym_eigvals(m, sym_tol: float = 1e-9) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotation, descending."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > sym_tol * max(1.0, np.max(np.abs(a))):
        raise ValueError(f"matrix is not symmetric (max |m - m.T| = {asym:.3g})")
    a = 0.5 * (a + a.T)
    return np.sort(_kernels.jacobi_eigvals(a))[::-1].copy()


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson needs two equal-length vectors of length >= 2")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = xc @ xc
    syy = yc @ yc
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant vector")
    r = (xc @ yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def ols_loglog(x, y) -> RegressionFit:
    """Least-squares line through ``(log x, log y)``; the slope is the power-law exponent."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("ols_loglog needs two equal-length vectors of length >= 2")
    if np.any(x <= 0) or np.any(y <= 0):
        raise ValueError("ols_loglog requires strictly positive inputs")
    lx, ly = np.log(x), np.log(y)
    lxc = lx - lx.mean()
    sxx = lxc @ lxc
    if sxx == 0.0:
        raise ValueError("ols_loglog needs at least two distinct x values")
    slope = (lxc @ (ly - ly.mean())) / sxx
    intercept = ly.mean() - slope * lx.mean()
    ss_res = np.sum((ly - (intercept + slope * lx)) ** 2)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 if ss_tot == 0.0 else float(np.clip(1.0 - ss_res / ss_tot, 0.0, 1.0))
    return RegressionFit(float(slope), float(intercept), r2)
