"""Binary checkpoint format.

Layout, all little-endian::

    b"PSAE"  u32 version (=1)
    config:  u32 d, u32 n, u32 k, u32 n_sizes, u32 sizes[n_sizes],
             f64 weights[n_sizes], u32 flags (bit0 unit-norm decoder,
             bit1 sampled granularities), f64 aux_scale, f64 sparsity_coeff,
             u32 meta_len, meta_len bytes of UTF-8 JSON
    tensors: u32 count, then per tensor u16 name_len, name, u8 ndim,
             u64 shape[ndim], f32 data (row-major)
    stats:   u8 present; if 1: u64 n_samples, u32 n, f64 sum_sq[n],
             u64 fire_count[n]

Nothing may follow the stats block.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from os import PathLike

import numpy as np

from .core import FormatError
from .matryoshka import GranularitySchedule
from .ranking import FeatureStats
from .sae import SaeConfig, SaeParams

MAGIC = b"PSAE"
VERSION = 1
TENSOR_NAMES = ("w_enc", "w_dec", "b_center", "b_enc")


@dataclass
class Checkpoint:
    params: SaeParams
    config: SaeConfig
    schedule: GranularitySchedule
    stats: FeatureStats | None = None
    meta: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    cfg, sched = ckpt.config, ckpt.schedule
    out = [MAGIC, struct.pack("<I", VERSION)]
    out.append(struct.pack("<4I", cfg.d, cfg.n, cfg.k, len(sched.sizes)))
    out.append(struct.pack(f"<{len(sched.sizes)}I", *sched.sizes))
    out.append(struct.pack(f"<{len(sched.weights)}d", *sched.weights))
    flags = (1 if cfg.unit_norm_decoder else 0) | (2 if sched.mode == "sampled" else 0)
    out.append(struct.pack("<Idd", flags, cfg.aux_scale, cfg.sparsity_coeff))
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    out.append(struct.pack("<I", len(meta)) + meta)
    out.append(struct.pack("<I", len(TENSOR_NAMES)))
    for name in TENSOR_NAMES:
        arr = np.asarray(getattr(ckpt.params, name))
        enc = name.encode()
        out.append(struct.pack("<H", len(enc)) + enc)
        out.append(struct.pack(f"<B{arr.ndim}Q", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if ckpt.stats is None:
        out.append(b"\x00")
    else:
        st = ckpt.stats
        out.append(struct.pack("<BQI", 1, st.n_samples, st.sum_sq.size))
        out.append(np.ascontiguousarray(st.sum_sq, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(st.fire_count, dtype="<u8").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated checkpoint: {what} needs {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count, what), dtype=dtype)


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    d, n, k, n_sizes = r.unpack("<4I", "config header")
    sizes = r.unpack(f"<{n_sizes}I", "granularity sizes")
    weights = r.unpack(f"<{n_sizes}d", "granularity weights")
    flags, aux_scale, sparsity = r.unpack("<Idd", "config flags")
    (meta_len,) = r.unpack("<I", "metadata length")
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata block: {exc}") from None
    try:
        cfg = SaeConfig(n=n, d=d, k=k, unit_norm_decoder=bool(flags & 1), aux_scale=aux_scale, sparsity_coeff=sparsity)
        schedule = GranularitySchedule(sizes, weights, k, "sampled" if flags & 2 else "fixed")
    except ValueError as exc:
        raise FormatError(f"inconsistent config block: {exc}") from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode(errors="replace")
        (ndim,) = r.unpack("<B", f"rank of {name}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        start = r.pos
        data = r.array("<f4", int(np.prod(shape, dtype=np.int64)), f"data of {name} (starting at offset {start})")
        tensors[name] = data.reshape(shape).astype(np.float64)
    if set(tensors) != set(TENSOR_NAMES):
        raise FormatError(f"expected tensors {TENSOR_NAMES}, found {sorted(tensors)}")
    params = SaeParams(**{name: tensors[name] for name in TENSOR_NAMES})
    try:
        params.validate()
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    if params.n != n or params.d != d:
        raise FormatError("tensor shapes disagree with the config block")
    (present,) = r.unpack("<B", "stats flag")
    stats = None
    if present == 1:
        n_samples, n_stats = r.unpack("<QI", "stats header")
        sum_sq = r.array("<f8", n_stats, "stats sum_sq").astype(np.float64)
        fire = r.array("<u8", n_stats, "stats fire_count").astype(np.int64)
        stats = FeatureStats(sum_sq, fire, int(n_samples))
    elif present != 0:
        raise FormatError(f"bad stats flag {present} at offset {r.pos - 1}")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes at offset {r.pos}")
    return Checkpoint(params, cfg, schedule, stats, meta)


def save_checkpoint(path: str | PathLike, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ckpt))


def load_checkpoint(path: str | PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
