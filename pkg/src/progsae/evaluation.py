"""Reconstruction metrics, frontier sweeps and feature-splitting analysis."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass
from os import PathLike
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import sae
from .core import UndefinedCorrelationError, pearson
from .matryoshka import per_granularity_k
from .sae import SaeParams

CSV_FIELDS = ("model_id", "granularity", "k", "fvu", "rsa")


@dataclass(frozen=True)
class FrontierPoint:
    model_id: str
    granularity: int
    k: int
    fvu: float
    rsa: float
    l0: float | None = None

    def __post_init__(self):
        if self.k > self.granularity:
            raise ValueError(f"k={self.k} exceeds granularity {self.granularity}")


def fvu(x, x_hat) -> float:
    """Mean squared error over mean squared deviation from the scalar mean of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    den = np.mean((x - x.mean()) ** 2)
    if den == 0.0:
        raise UndefinedCorrelationError("FVU is undefined for constant inputs")
    return float(np.mean((x - x_hat) ** 2) / den)


def rdm(a) -> np.ndarray:
    """Upper triangle (i < j, row-major) of pairwise squared Euclidean distances."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 2:
        raise ValueError("rdm needs at least two rows")
    n = a.shape[0]
    out = np.empty(n * (n - 1) // 2)
    pos = 0
    # explicit differences rather than the Gram identity, so identical rows give exact zeros
    for i in range(n - 1):
        diff = a[i + 1 :] - a[i]
        out[pos : pos + n - 1 - i] = np.einsum("jd,jd->j", diff, diff)
        pos += n - 1 - i
    return out


def rsa_score(a, a_hat) -> float:
    a = np.asarray(a, dtype=np.float64)
    a_hat = np.asarray(a_hat, dtype=np.float64)
    if a.shape[0] != a_hat.shape[0] or a.shape[0] < 3:
        raise ValueError("rsa_score needs the same n >= 3 samples on both sides")
    return pearson(rdm(a), rdm(a_hat))


def _metrics(params: SaeParams, x: np.ndarray, k: int, g: int, rsa_samples: int) -> tuple[float, float, float]:
    codes, x_hat = sae.forward(params, x, k, g)
    sub = slice(0, min(rsa_samples, x.shape[0]))
    l0 = float(np.count_nonzero(codes.values) / codes.n_samples)
    return fvu(x, x_hat), rsa_score(x[sub], x_hat[sub]), l0


def progressive_frontier(
    params: SaeParams,
    x,
    granularities: Iterable[int],
    K: int,
    model_id: str = "model",
    perm=None,
    rsa_samples: int = 2000,
) -> list[FrontierPoint]:
    """FVU and RSA of the g-prefix model at fixed relative sparsity ``K / N``.

    With ``perm`` the latents are reordered first (pruned baseline); without it
    the raw prefix is used, which is what a Matryoshka SAE is trained for.
    RSA uses the first ``rsa_samples`` rows of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if perm is not None:
        params = sae.apply_permutation(params, perm)
    points = []
    for g in granularities:
        if not 1 <= g <= params.n:
            raise ValueError(f"granularity {g} outside [1, {params.n}]")
        k = per_granularity_k(K, params.n, g)
        f, r, l0 = _metrics(params, x, k, g, rsa_samples)
        points.append(FrontierPoint(model_id, int(g), k, f, r, l0))
    return points


def sparsity_frontier(models: Iterable[tuple[str, SaeParams, int]], x, rsa_samples: int = 2000) -> list[FrontierPoint]:
    """Full-width FVU/RSA for each ``(model_id, params, k)``; ``l0`` is the measured mean ``|z|_0``."""
    x = np.asarray(x, dtype=np.float64)
    points = []
    for model_id, params, k in models:
        f, r, l0 = _metrics(params, x, k, params.n, rsa_samples)
        points.append(FrontierPoint(model_id, params.n, int(k), f, r, l0))
    return points


def metric_correlation(data: Sequence[FrontierPoint] | Mapping[str, Sequence[float]]) -> tuple[tuple[str, ...], np.ndarray]:
    """Pairwise Pearson correlations; frontier points contribute their ``fvu`` and ``rsa``."""
    if isinstance(data, Mapping):
        columns = {name: np.asarray(v, dtype=np.float64) for name, v in data.items()}
    else:
        columns = {
            "fvu": np.array([p.fvu for p in data]),
            "rsa": np.array([p.rsa for p in data]),
        }
    names = tuple(columns)
    sizes = {v.size for v in columns.values()}
    if len(sizes) != 1 or sizes.pop() < 3:
        raise ValueError("metric_correlation needs at least three points per metric")
    corr = np.eye(len(names))
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            corr[i, j] = corr[j, i] = pearson(columns[names[i]], columns[names[j]])
    return names, corr


@dataclass
class FeatureSplitResult:
    mean_index: np.ndarray  # NaN for excluded features
    neighbors: np.ndarray  # (N, top_m), -1 for excluded features
    excluded: np.ndarray
    block_edges: tuple[int, ...]
    block_means: np.ndarray

    def max_block_jump(self) -> float:
        """Largest change in block mean across consecutive blocks."""
        if self.block_means.size < 2:
            return 0.0
        return float(np.max(np.abs(np.diff(self.block_means))))


def feature_split_analysis(w_dec, top_m: int = 5, block_edges: Sequence[int] | None = None, chunk: int = 2048) -> FeatureSplitResult:
    """Mean index of each feature's ``top_m`` nearest other decoder rows by cosine similarity.

    Equal similarities resolve to the lower index. ``block_edges`` are the
    interior boundaries (e.g. schedule sizes below N) used for block means;
    zero-norm rows are dropped with a warning.
    """
    w = np.asarray(w_dec, dtype=np.float64)
    n = w.shape[0]
    if n < top_m + 1:
        raise ValueError(f"need at least top_m + 1 = {top_m + 1} features")
    norms = np.linalg.norm(w, axis=1)
    excluded = norms == 0
    if excluded.any():
        warnings.warn(f"{int(excluded.sum())} zero-norm decoder rows excluded from the neighbour search", stacklevel=2)
    valid = np.flatnonzero(~excluded)
    if valid.size < top_m + 1:
        raise ValueError("too few nonzero decoder rows")
    unit = w[valid] / norms[valid, None]
    neighbors = np.full((n, top_m), -1, dtype=np.int64)
    for start in range(0, valid.size, chunk):
        rows = np.arange(start, min(start + chunk, valid.size))
        sims = unit[rows] @ unit.T
        sims[np.arange(rows.size), rows] = -np.inf
        order = np.argsort(-sims, axis=1, kind="stable")[:, :top_m]
        neighbors[valid[rows]] = valid[order]
    mean_index = np.full(n, np.nan)
    mean_index[valid] = neighbors[valid].mean(axis=1)
    edges = tuple(sorted(int(e) for e in (block_edges or ()) if 0 < int(e) < n))
    bounds = (0, *edges, n)
    block_means = np.array([np.nanmean(mean_index[a:b]) for a, b in zip(bounds, bounds[1:])])
    return FeatureSplitResult(mean_index, neighbors, excluded, edges, block_means)


def write_frontier_csv(path: str | PathLike, points: Iterable[FrontierPoint]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for p in points:
            writer.writerow([p.model_id, p.granularity, p.k, repr(float(p.fvu)), repr(float(p.rsa))])


def read_frontier_csv(path: str | PathLike) -> list[FrontierPoint]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ValueError(f"expected CSV columns {CSV_FIELDS}, got {reader.fieldnames}")
        return [FrontierPoint(r["model_id"], int(r["granularity"]), int(r["k"]), float(r["fvu"]), float(r["rsa"])) for r in reader]


def write_frontier_json(path: str | PathLike, points: Iterable[FrontierPoint], config: dict) -> None:
    with open(path, "w") as fh:
        json.dump({"config": config, "points": [asdict(p) for p in points]}, fh, indent=2, sort_keys=True)
