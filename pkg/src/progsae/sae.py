"""TopK sparse autoencoder: parameters, encode/decode, losses, permutation."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from . import _kernels
from .core import CorruptCodeError, SparseCodeBatch, sparse_decode_matmul, topk_select


@dataclass
class SaeParams:
    """Weights of one SAE. ``w_enc`` is (D, N), ``w_dec`` is (N, D)."""

    w_enc: np.ndarray
    w_dec: np.ndarray
    b_center: np.ndarray
    b_enc: np.ndarray

    @property
    def n(self) -> int:
        return self.w_dec.shape[0]

    @property
    def d(self) -> int:
        return self.w_dec.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "SaeParams":
        return SaeParams(**{k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> "SaeParams":
        return SaeParams(**{k: np.asarray(v, dtype=dtype).copy() for k, v in self.arrays().items()})

    def validate(self, unit_norm: bool = False, tol: float = 1e-5) -> None:
        n, d = self.w_dec.shape
        expected = {"w_enc": (d, n), "w_dec": (n, d), "b_center": (d,), "b_enc": (n,)}
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
        if unit_norm:
            norms = np.linalg.norm(self.w_dec, axis=1)
            if np.any(np.abs(norms - 1.0) > tol):
                raise ValueError("decoder rows are not unit norm")


@dataclass
class SaeConfig:
    n: int
    d: int
    k: int
    unit_norm_decoder: bool = True
    aux_scale: float = 1.0 / 32.0
    sparsity_coeff: float = 0.0

    def __post_init__(self):
        if not 0 <= self.k <= self.n:
            raise ValueError(f"k={self.k} must lie in [0, n={self.n}]")
        if self.aux_scale < 0:
            raise ValueError("aux_scale must be nonnegative")


class LossTerms(NamedTuple):
    total: float
    recon: float
    aux: float


class AuxTerms(NamedTuple):
    value: float
    codes: SparseCodeBatch | None  # indices are global feature ids
    recon: np.ndarray | None  # dead-feature reconstruction of the residual, no bias
    residual: np.ndarray | None
    scale: float  # normaliser of the squared error


def init_params(d: int, n: int, rng: np.random.Generator) -> SaeParams:
    """Random unit-norm decoder rows, tied transposed encoder, zero biases."""
    w_dec = rng.standard_normal((n, d))
    w_dec /= np.linalg.norm(w_dec, axis=1, keepdims=True)
    return SaeParams(
        w_enc=w_dec.T.copy(),
        w_dec=w_dec,
        b_center=np.zeros(d),
        b_enc=np.zeros(n),
    )


def _check_granularity(params: SaeParams, g: int | None) -> int:
    g = params.n if g is None else int(g)
    if not 1 <= g <= params.n:
        raise ValueError(f"granularity {g} outside [1, {params.n}]")
    return g


def pre_activation(params: SaeParams, x, g: int | None = None) -> np.ndarray:
    """``(x - b_center) @ w_enc[:, :g] + b_enc[:g]``; bitwise a prefix of the width-N result."""
    g = _check_granularity(params, g)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d:
        raise ValueError(f"expected inputs of shape (batch, {params.d}), got {x.shape}")
    return _kernels.encode_dense(x - params.b_center, params.w_enc, params.b_enc, g)


def encode(params: SaeParams, x, k: int, g: int | None = None) -> SparseCodeBatch:
    g = _check_granularity(params, g)
    if not 0 <= k <= g:
        raise ValueError(f"k={k} exceeds granularity {g}")
    return topk_select(pre_activation(params, x, g), k)


def decode(params: SaeParams, codes: SparseCodeBatch, g: int | None = None) -> np.ndarray:
    g = codes.dim if g is None else int(g)
    if codes.dim != g:
        raise CorruptCodeError(f"codes have dim {codes.dim}, decoding at granularity {g}")
    g = _check_granularity(params, g)
    return sparse_decode_matmul(codes, params.w_dec[:g]) + params.b_center


def forward(params: SaeParams, x, k: int, g: int | None = None) -> tuple[SparseCodeBatch, np.ndarray]:
    codes = encode(params, x, k, g)
    return codes, decode(params, codes, codes.dim)


def recon_loss(x, x_hat) -> float:
    """Mean over the batch of the squared L2 reconstruction error."""
    diff = np.asarray(x, dtype=np.float64) - x_hat
    return float(np.einsum("bd,bd->", diff, diff) / diff.shape[0])


def sparsity_penalty(codes: SparseCodeBatch) -> float:
    """Mean L1 norm of the latent; only used when ``sparsity_coeff`` is nonzero."""
    return float(np.abs(codes.values).sum() / max(codes.n_samples, 1))


def aux_terms(params: SaeParams, pre: np.ndarray, residual: np.ndarray, dead_mask) -> AuxTerms:
    """Reconstruct the residual from the top ``min(N/2, n_dead)`` dead-feature pre-activations.

    The squared error is normalised by the residual's variance around its batch
    mean. The residual is a fixed target: no gradient flows back through it.
    """
    dead_ids = np.flatnonzero(np.asarray(dead_mask, dtype=bool))
    k_aux = min(params.n // 2, dead_ids.size)
    if k_aux == 0:
        return AuxTerms(0.0, None, None, None, 1.0)
    local = topk_select(pre[:, dead_ids], k_aux)
    codes = SparseCodeBatch(dead_ids[local.indices], local.values, params.n)
    e_hat = sparse_decode_matmul(codes, params.w_dec)
    centered = residual - residual.mean(axis=0)
    scale = float(np.einsum("bd,bd->", centered, centered) / residual.shape[0])
    if scale == 0.0:
        scale = 1.0
    value = recon_loss(residual, e_hat) / scale
    return AuxTerms(value, codes, e_hat, residual, scale)


def sae_loss(
    params: SaeParams,
    x,
    codes: SparseCodeBatch,
    x_hat: np.ndarray,
    dead_mask,
    cfg: SaeConfig,
    pre: np.ndarray | None = None,
) -> LossTerms:
    """Reconstruction + ``sparsity_coeff * S(z)`` + ``aux_scale * aux``."""
    x = np.asarray(x, dtype=np.float64)
    recon = recon_loss(x, x_hat)
    aux = 0.0
    if np.any(dead_mask):
        if pre is None:
            pre = pre_activation(params, x)
        aux = aux_terms(params, pre, x - x_hat, dead_mask).value
    total = recon + cfg.aux_scale * aux
    if cfg.sparsity_coeff:
        total += cfg.sparsity_coeff * sparsity_penalty(codes)
    return LossTerms(total, recon, aux)


def check_permutation(perm, n: int) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.shape != (n,) or not np.issubdtype(perm.dtype, np.integer):
        raise ValueError(f"permutation must be {n} integers")
    if not np.array_equal(np.sort(perm), np.arange(n)):
        raise ValueError("permutation is not a bijection on 0..N-1")
    return perm.astype(np.int64)


def apply_permutation(params: SaeParams, perm) -> SaeParams:
    """Reorder latents so that new feature ``i`` is old feature ``perm[i]``."""
    perm = check_permutation(perm, params.n)
    return SaeParams(
        w_enc=params.w_enc[:, perm],
        w_dec=params.w_dec[perm],
        b_center=params.b_center.copy(),
        b_enc=params.b_enc[perm],
    )
