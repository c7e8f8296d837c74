"""Feature importance statistics and conversion of a trained SAE into a progressive coder."""

from __future__ import annotations

from dataclasses import dataclass
from os import PathLike
from typing import Iterable, NamedTuple

import numpy as np

from . import sae
from .matryoshka import per_granularity_k
from .sae import SaeParams

CRITERIA = ("mean_sq", "freq")


@dataclass
class FeatureStats:
    """Running sums of z^2 and firing counts over the full-width TopK code."""

    sum_sq: np.ndarray
    fire_count: np.ndarray
    n_samples: int

    @classmethod
    def empty(cls, n: int) -> "FeatureStats":
        return cls(np.zeros(n), np.zeros(n, dtype=np.int64), 0)

    @property
    def mean_sq_act(self) -> np.ndarray:
        return self.sum_sq / max(self.n_samples, 1)

    @property
    def fire_freq(self) -> np.ndarray:
        return self.fire_count / max(self.n_samples, 1)

    def update(self, codes) -> None:
        n = self.sum_sq.size
        idx = codes.indices.ravel()
        vals = codes.values.ravel()
        self.sum_sq += np.bincount(idx, weights=vals * vals, minlength=n)
        self.fire_count += np.bincount(idx[vals != 0], minlength=n)
        self.n_samples += codes.n_samples

    def merge(self, other: "FeatureStats") -> "FeatureStats":
        return FeatureStats(self.sum_sq + other.sum_sq, self.fire_count + other.fire_count, self.n_samples + other.n_samples)

    def score(self, criterion: str) -> np.ndarray:
        criterion = criterion.replace("-", "_")
        if criterion == "mean_sq":
            return self.mean_sq_act
        if criterion == "freq":
            return self.fire_freq
        raise ValueError(f"unknown ranking criterion {criterion!r}; expected one of {CRITERIA}")


def collect_stats(params: SaeParams, batches: Iterable, k: int) -> FeatureStats:
    """Single pass of full-width TopK encoding; exact means over the samples seen."""
    stats = FeatureStats.empty(params.n)
    for batch in batches:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 2 or batch.shape[1] != params.d:
            raise ValueError(f"batch shape {batch.shape} does not match input dim {params.d}")
        if batch.shape[0]:
            stats.update(sae.encode(params, batch, k))
    if stats.n_samples == 0:
        raise ValueError("collect_stats received an empty stream")
    return stats


def rank_features(stats: FeatureStats, criterion: str = "mean_sq") -> np.ndarray:
    """Feature ids by descending importance; equal scores keep ascending id order."""
    return np.argsort(-stats.score(criterion), kind="stable").astype(np.int64)


def invert_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


class PrunedSae(NamedTuple):
    params: SaeParams
    k: int


def prune_to_granularity(params: SaeParams, perm, g: int, K: int) -> PrunedSae:
    """Permute, then keep the first ``g`` latents with relative-sparsity ``k``."""
    if not 1 <= g <= params.n:
        raise ValueError(f"granularity {g} outside [1, {params.n}]")
    p = sae.apply_permutation(params, perm)
    pruned = SaeParams(
        w_enc=np.ascontiguousarray(p.w_enc[:, :g]),
        w_dec=np.ascontiguousarray(p.w_dec[:g]),
        b_center=p.b_center,
        b_enc=np.ascontiguousarray(p.b_enc[:g]),
    )
    return PrunedSae(pruned, per_granularity_k(K, params.n, g))


def write_permutation(path: str | PathLike, perm) -> None:
    with open(path, "w") as fh:
        fh.writelines(f"{int(i)}\n" for i in perm)


def read_permutation(path: str | PathLike, n: int | None = None) -> np.ndarray:
    with open(path) as fh:
        perm = np.array([int(line) for line in fh if line.strip()], dtype=np.int64)
    return sae.check_permutation(perm, perm.size if n is None else n)
