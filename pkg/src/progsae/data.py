"""Synthetic superposition activations, shard I/O and batching.

Shard format (little-endian)::

    b"SAEA"  u32 version (=1)  u64 n_samples  u32 dim   -> 20-byte header
    f32 payload, row-major, n_samples * dim values

Headerless raw f32 dumps are read with ``read_raw_f32`` given the dimension.
"""

from __future__ import annotations

import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
import scipy.sparse

from .core import FormatError

SHARD_MAGIC = b"SAEA"
SHARD_VERSION = 1
SHARD_HEADER = struct.Struct("<4sIQI")

# generation block; fixed so that output bytes never depend on how callers chunk
BLOCK = 8192


@dataclass(frozen=True)
class SuperpositionConfig:
    n_true: int = 2048
    d: int = 64
    p_active: float = 0.01
    importance_exponent: float = -0.6
    noise_std: float = 0.0
    seed: int = 0
    dictionary_seed: int | None = None  # defaults to ``seed``; set it to draw fresh samples of the same features
    signal_power: float | None = None  # expected sum of s_r^2 per sample; defaults to ``d`` (unit scale per coordinate)

    def __post_init__(self):
        if not 0 < self.p_active < 1:
            raise ValueError("p_active must lie in (0, 1)")
        if self.n_true <= self.d:
            raise ValueError("n_true must exceed d (superposition)")
        if self.importance_exponent >= 0:
            raise ValueError("importance_exponent must be negative")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.signal_power is not None and self.signal_power <= 0:
            raise ValueError("signal_power must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def feature_scales(self) -> np.ndarray:
        """``c * rank**importance_exponent`` with ``c`` set so that ``E[sum_r s_r^2]`` equals ``signal_power``."""
        base = np.arange(1, self.n_true + 1, dtype=np.float64) ** self.importance_exponent
        power = self.d if self.signal_power is None else self.signal_power
        # E[u^2] = 13/12 for u ~ U(0.5, 1.5)
        expected = self.p_active * 13.0 / 12.0 * np.sum(base**2)
        return base * np.sqrt(power / expected)

    def dictionary(self) -> np.ndarray:
        """Ground-truth directions, (d, n_true) with unit-norm columns."""
        seed = self.seed if self.dictionary_seed is None else self.dictionary_seed
        m = np.random.default_rng([seed, 0]).standard_normal((self.d, self.n_true))
        return m / np.linalg.norm(m, axis=0, keepdims=True)


@dataclass
class ActivationShard:
    data: np.ndarray  # (n_samples, dim) float32
    provenance: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


def _block_latents(cfg: SuperpositionConfig, block: int, scales: np.ndarray):
    """Sparse ground-truth latents of one block as (rows, features, values).

    Independent Bernoulli gates over the block x n_true grid are drawn as a
    binomial count of distinct uniformly placed positions, which has the
    same law and costs O(active) instead of O(block * n_true).
    """
    rng = np.random.default_rng([cfg.seed, 1, block])
    grid = BLOCK * cfg.n_true
    target = int(rng.binomial(grid, cfg.p_active))
    pos = np.unique(rng.integers(0, grid, target))
    while pos.size < target:
        pos = np.unique(np.concatenate([pos, rng.integers(0, grid, target - pos.size)]))
    rows, feats = np.divmod(pos, cfg.n_true)
    vals = rng.uniform(0.5, 1.5, target) * scales[feats]
    return rows, feats, vals, rng


def _blocks(cfg: SuperpositionConfig, n_samples: int) -> Iterator[np.ndarray]:
    m_t = cfg.dictionary().T.copy()
    scales = cfg.feature_scales()
    for block in range((n_samples + BLOCK - 1) // BLOCK):
        rows, feats, vals, rng = _block_latents(cfg, block, scales)
        s = scipy.sparse.csr_matrix((vals, (rows, feats)), shape=(BLOCK, cfg.n_true))
        x = np.asarray(s @ m_t)
        if cfg.noise_std > 0:
            x += rng.normal(0.0, cfg.noise_std, size=x.shape)
        take = min(BLOCK, n_samples - block * BLOCK)
        yield x[:take].astype(np.float32)


def iter_superposition(cfg: SuperpositionConfig, n_samples: int) -> Iterator[np.ndarray]:
    """Generated samples as float32 blocks; concatenated they equal ``gen_superposition``."""
    if n_samples < 0:
        raise ValueError("n_samples must be nonnegative")
    yield from _blocks(cfg, n_samples)


def gen_superposition(cfg: SuperpositionConfig, n_samples: int) -> ActivationShard:
    """Observed activations ``x = M s + noise`` with power-law feature importances."""
    parts = list(iter_superposition(cfg, n_samples))
    data = np.concatenate(parts) if parts else np.zeros((0, cfg.d), dtype=np.float32)
    return ActivationShard(data, {"generator": "superposition", "n_samples": n_samples, **cfg.to_dict()})


def stream_superposition(cfg: SuperpositionConfig, n_samples: int, batch_size: int) -> Iterator[np.ndarray]:
    """float64 batches straight from the generator, never holding the full set in memory."""
    buf = np.zeros((0, cfg.d))
    for block in iter_superposition(cfg, n_samples):
        buf = np.concatenate([buf, block.astype(np.float64)])
        while buf.shape[0] >= batch_size:
            yield buf[:batch_size]
            buf = buf[batch_size:]
    if buf.shape[0]:
        yield buf


def latent_power(cfg: SuperpositionConfig, n_samples: int) -> np.ndarray:
    """Monte Carlo mean of s_r^2 per ground-truth feature over the first ``n_samples``."""
    scales = cfg.feature_scales()
    total = np.zeros(cfg.n_true)
    for block in range((n_samples + BLOCK - 1) // BLOCK):
        rows, feats, vals, _ = _block_latents(cfg, block, scales)
        keep = rows < n_samples - block * BLOCK
        total += np.bincount(feats[keep], weights=vals[keep] ** 2, minlength=cfg.n_true)
    return total / n_samples


def write_shard(path: str | os.PathLike, shard: ActivationShard) -> None:
    data = np.ascontiguousarray(shard.data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("shard data must be 2-D")
    if not np.all(np.isfinite(data)):
        raise ValueError("shard data contains non-finite values")
    with open(path, "wb") as fh:
        fh.write(SHARD_HEADER.pack(SHARD_MAGIC, SHARD_VERSION, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def read_shard(path: str | os.PathLike) -> ActivationShard:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < SHARD_HEADER.size:
        raise FormatError(f"file of {len(buf)} bytes is shorter than the {SHARD_HEADER.size}-byte shard header")
    magic, version, n, dim = SHARD_HEADER.unpack_from(buf)
    if magic != SHARD_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {SHARD_MAGIC!r}")
    if version != SHARD_VERSION:
        if struct.unpack(">I", struct.pack("<I", version))[0] == SHARD_VERSION:
            raise FormatError("shard header is big-endian; only little-endian shards are supported")
        raise FormatError(f"unsupported shard version {version}")
    expected = SHARD_HEADER.size + 4 * n * dim
    if len(buf) != expected:
        raise FormatError(f"payload length mismatch: header implies {expected} bytes, file has {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", offset=SHARD_HEADER.size).reshape(n, dim).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise FormatError("shard payload contains non-finite values")
    return ActivationShard(data, {"source": os.fspath(path)})


def read_raw_f32(path: str | os.PathLike, dim: int, n_samples: int | None = None) -> ActivationShard:
    """Headerless little-endian f32 dump, e.g. activations exported from a language model."""
    if dim < 1:
        raise ValueError("dim must be positive")
    raw = np.fromfile(path, dtype="<f4")
    if raw.size % dim:
        raise FormatError(f"{raw.size} floats do not divide into rows of {dim}")
    data = raw.reshape(-1, dim)
    if n_samples is not None:
        if n_samples > data.shape[0]:
            raise FormatError(f"requested {n_samples} samples, file holds {data.shape[0]}")
        data = data[:n_samples]
    return ActivationShard(data.astype(np.float32), {"source": os.fspath(path), "raw": True})


def batch_iter(data, batch_size: int, shuffle_seed: int | None = None) -> Iterator[np.ndarray]:
    """One epoch of float64 batches in a seeded random order; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    arr = data.data if isinstance(data, ActivationShard) else np.asarray(data)
    n = arr.shape[0]
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        yield arr[order[start : start + batch_size]].astype(np.float64)
