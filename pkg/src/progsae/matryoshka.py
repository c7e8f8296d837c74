"""Nested multi-granularity forward pass and loss with shared weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import sae
from .core import SparseCodeBatch, topk_select
from .sae import SaeConfig, SaeParams


def per_granularity_k(K: int, N: int, m: int) -> int:
    """Active count at granularity ``m`` keeping ``k / m == K / N``.

    Rounds half up and clamps to ``[1, m]``.
    """
    if not (1 <= m <= N and 0 <= K <= N):
        raise ValueError(f"need 1 <= m <= N and K <= N, got K={K} N={N} m={m}")
    k = (2 * K * m + N) // (2 * N)
    return int(min(max(k, 1), m))


@dataclass(frozen=True)
class GranularitySchedule:
    sizes: tuple[int, ...]
    weights: tuple[float, ...]
    full_k: int
    mode: str = "fixed"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "weights", weights)
        if not sizes or sizes[0] < 1 or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError(f"sizes must be strictly ascending positive counts, got {sizes}")
        if len(weights) != len(sizes):
            raise ValueError("one weight per granularity is required")
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise ValueError("weights must be nonnegative with at least one positive")
        if self.mode not in ("fixed", "sampled"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if not 1 <= self.full_k <= sizes[-1]:
            raise ValueError(f"full_k={self.full_k} must lie in [1, {sizes[-1]}]")

    @classmethod
    def fixed(cls, sizes: Sequence[int], full_k: int, weights: Sequence[float] | None = None, mode: str = "fixed"):
        sizes = tuple(sorted(int(s) for s in sizes))
        if weights is None:
            weights = (1.0,) * len(sizes)
        return cls(sizes, tuple(weights), int(full_k), mode)

    @classmethod
    def plain(cls, n: int, k: int) -> "GranularitySchedule":
        return cls.fixed((n,), k)

    @property
    def n(self) -> int:
        return self.sizes[-1]

    def ks(self) -> tuple[int, ...]:
        return tuple(per_granularity_k(self.full_k, self.n, m) for m in self.sizes)

    def check(self, params: SaeParams) -> None:
        if self.n != params.n:
            raise ValueError(f"schedule ends at {self.n} but the SAE has {params.n} latents")


class GranularityOutput(NamedTuple):
    m: int
    k: int
    codes: SparseCodeBatch
    x_hat: np.ndarray


class MatryoshkaLoss(NamedTuple):
    total: float
    recon: dict[int, float]
    aux: float


def matryoshka_forward(params: SaeParams, x, schedule: GranularitySchedule, pre: np.ndarray | None = None) -> list[GranularityOutput]:
    """Encode once at full width, then TopK and decode each prefix independently."""
    schedule.check(params)
    if pre is None:
        pre = sae.pre_activation(params, x, params.n)
    outputs = []
    for m, k in zip(schedule.sizes, schedule.ks()):
        codes = topk_select(pre[:, :m], k)
        outputs.append(GranularityOutput(m, k, codes, sae.decode(params, codes, m)))
    return outputs


def matryoshka_loss(
    params: SaeParams,
    outputs: Sequence[GranularityOutput],
    x,
    schedule: GranularitySchedule,
    dead_mask,
    cfg: SaeConfig,
    pre: np.ndarray | None = None,
) -> MatryoshkaLoss:
    """``sum_m c_m * mean|x - x_hat_m|^2``; sparsity and aux only on the full latent."""
    x = np.asarray(x, dtype=np.float64)
    by_m = {out.m: out for out in outputs}
    missing = [m for m in schedule.sizes if m not in by_m]
    if missing:
        raise ValueError(f"no forward output for granularities {missing}")
    recon = {m: sae.recon_loss(x, by_m[m].x_hat) for m in schedule.sizes}
    total = sum(c * recon[m] for m, c in zip(schedule.sizes, schedule.weights))
    full = by_m[schedule.n]
    aux = 0.0
    if np.any(dead_mask):
        if pre is None:
            pre = sae.pre_activation(params, x, params.n)
        aux = sae.aux_terms(params, pre, x - full.x_hat, dead_mask).value
    total += cfg.aux_scale * aux
    if cfg.sparsity_coeff:
        total += cfg.sparsity_coeff * sae.sparsity_penalty(full.codes)
    return MatryoshkaLoss(float(total), recon, float(aux))


def sample_granularity(rng: np.random.Generator, N: int, K: int) -> tuple[int, int]:
    """Draw ``m`` uniformly from ``{1, ..., N}`` and its relative-sparsity ``k``."""
    if N < 1:
        raise ValueError("N must be at least 1")
    m = int(rng.integers(1, N + 1))
    return m, per_granularity_k(K, N, m)


def sampled_schedule(rng: np.random.Generator, N: int, K: int) -> GranularitySchedule:
    """One training step's schedule ``{m, N}``; the full width is always trained."""
    m, _ = sample_granularity(rng, N, K)
    sizes = (N,) if m == N else (m, N)
    return GranularitySchedule.fixed(sizes, K, mode="sampled")
