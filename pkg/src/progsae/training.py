"""AdamW training of TopK and Matryoshka SAEs with hand-written gradients."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from . import _kernels, sae
from .core import SparseCodeBatch
from .matryoshka import GranularityOutput, GranularitySchedule, MatryoshkaLoss, matryoshka_forward, matryoshka_loss, sampled_schedule
from .sae import SaeConfig, SaeParams

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    batch_size: int = 1024
    n_tokens: int | None = None
    dead_window: int = 100_000
    seed: int = 0
    init_b_center: bool = True

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


@dataclass
class DeadFeatureTracker:
    """Samples seen since each feature last fired; dead once that reaches ``window``."""

    counts: np.ndarray
    window: int

    @classmethod
    def create(cls, n: int, window: int) -> "DeadFeatureTracker":
        return cls(np.zeros(n, dtype=np.int64), int(window))

    @property
    def mask(self) -> np.ndarray:
        return self.counts >= self.window

    def update(self, codes: SparseCodeBatch) -> np.ndarray:
        active = np.zeros(self.counts.size, dtype=bool)
        active[codes.indices[codes.values != 0]] = True
        self.counts[~active] += codes.n_samples
        self.counts[active] = 0
        return self.mask


def track_dead(tracker: DeadFeatureTracker, codes: SparseCodeBatch) -> tuple[DeadFeatureTracker, np.ndarray]:
    if codes.dim != tracker.counts.size:
        raise ValueError(f"codes have dim {codes.dim}, tracker covers {tracker.counts.size} features")
    mask = tracker.update(codes)
    return tracker, mask


class StepResult(NamedTuple):
    grads: SaeParams
    loss: MatryoshkaLoss
    outputs: list[GranularityOutput]


def compute_grads(
    params: SaeParams,
    x,
    schedule: GranularitySchedule,
    cfg: SaeConfig,
    dead_mask=None,
) -> StepResult:
    """Exact gradients of the nested loss with the TopK supports held fixed.

    A plain TopK SAE is the single-granularity schedule ``{N}``. The aux
    residual is a constant target, as in the loss itself.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    n, b = params.n, x.shape[0]
    if dead_mask is None:
        dead_mask = np.zeros(n, dtype=bool)
    pre = sae.pre_activation(params, x, n)
    outputs = matryoshka_forward(params, x, schedule, pre=pre)
    loss = matryoshka_loss(params, outputs, x, schedule, dead_mask, cfg, pre=pre)
    if not np.isfinite(loss.total):
        raise DivergenceError(f"non-finite loss {loss.total} (recon={loss.recon}, aux={loss.aux})")

    w_dec = params.w_dec
    d_dec = np.zeros_like(w_dec, dtype=np.float64)
    d_center = np.zeros(params.d)
    d_pre = np.zeros((b, n))
    rows = np.arange(b)[:, None]

    def backprop_codes(codes: SparseCodeBatch, grad_out: np.ndarray) -> None:
        nonlocal d_dec
        d_dec += _kernels.sparse_scatter_rows(codes.indices, codes.values, grad_out, n)
        d_pre[rows, codes.indices] += _kernels.sparse_gather_dot(codes.indices, grad_out, w_dec)

    for out, c in zip(outputs, schedule.weights):
        if c == 0:
            continue
        g_out = (2.0 * c / b) * (out.x_hat - x)
        d_center += g_out.sum(axis=0)
        backprop_codes(out.codes, g_out)

    full = outputs[-1]
    if cfg.sparsity_coeff:
        d_pre[rows, full.codes.indices] += cfg.sparsity_coeff * np.sign(full.codes.values) / b

    if cfg.aux_scale and np.any(dead_mask):
        aux = sae.aux_terms(params, pre, x - full.x_hat, dead_mask)
        if aux.codes is not None:
            g_aux = (2.0 * cfg.aux_scale / (b * aux.scale)) * (aux.recon - aux.residual)
            backprop_codes(aux.codes, g_aux)

    d_enc_bias = d_pre.sum(axis=0)
    xc = x - params.b_center
    grads = SaeParams(
        w_enc=xc.T @ d_pre,
        w_dec=d_dec,
        b_center=d_center - params.w_enc @ d_enc_bias,
        b_enc=d_enc_bias,
    )
    return StepResult(grads, loss, outputs)


def renormalize_decoder(params: SaeParams) -> None:
    norms = np.linalg.norm(params.w_dec, axis=1, keepdims=True)
    np.divide(params.w_dec, norms, out=params.w_dec, where=norms > 0)


def adamw_step(state: AdamWState, params: SaeParams, grads: SaeParams, cfg: TrainConfig, unit_norm_decoder: bool = False) -> SaeParams:
    """One decoupled-weight-decay Adam update, applied to ``params`` in place."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1**state.t
    bc2 = 1.0 - cfg.beta2**state.t
    for name, theta in params.arrays().items():
        g = getattr(grads, name)
        if name not in state.m:
            state.m[name] = np.zeros_like(theta, dtype=np.float64)
            state.v[name] = np.zeros_like(theta, dtype=np.float64)
        m, v = state.m[name], state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps) + cfg.weight_decay * theta
        theta -= cfg.lr * update
    if unit_norm_decoder:
        renormalize_decoder(params)
    return params


@dataclass
class TrainResult:
    params: SaeParams
    log: list[dict]
    tracker: DeadFeatureTracker
    state: AdamWState
    n_seen: int


def _take(stream: Iterable, limit: int | None):
    seen = 0
    for batch in stream:
        batch = np.asarray(batch, dtype=np.float64)
        if limit is not None:
            if seen >= limit:
                return
            batch = batch[: limit - seen]
        if batch.shape[0] == 0:
            continue
        seen += batch.shape[0]
        yield batch


def train(
    params: SaeParams,
    data_stream: Iterable,
    schedule: GranularitySchedule,
    cfg: SaeConfig,
    train_cfg: TrainConfig,
    log_every: int = 1,
) -> TrainResult:
    """Stream batches through AdamW. The input ``params`` are not modified.

    In sampled mode each step trains ``{m, N}`` with ``m`` drawn uniformly.
    """
    params = params.astype(np.float64)
    schedule.check(params)
    if cfg.n != params.n or cfg.d != params.d:
        raise ValueError("SaeConfig does not match the parameter shapes")
    rng = np.random.default_rng([train_cfg.seed, 0x5A3])
    tracker = DeadFeatureTracker.create(params.n, train_cfg.dead_window)
    state = AdamWState()
    history: list[dict] = []
    n_seen = 0
    for step, batch in enumerate(_take(data_stream, train_cfg.n_tokens)):
        if batch.shape[1] != params.d:
            raise ValueError(f"batch has dim {batch.shape[1]}, SAE expects {params.d}")
        if step == 0 and train_cfg.init_b_center:
            params.b_center[:] = batch.mean(axis=0)
        step_schedule = sampled_schedule(rng, params.n, schedule.full_k) if schedule.mode == "sampled" else schedule
        try:
            res = compute_grads(params, batch, step_schedule, cfg, dead_mask=tracker.mask)
        except DivergenceError as exc:
            raise DivergenceError(f"step {step} (after {n_seen} samples): {exc}") from None
        tracker.update(res.outputs[-1].codes)
        adamw_step(state, params, res.grads, train_cfg, cfg.unit_norm_decoder)
        n_seen += batch.shape[0]
        if step % log_every == 0:
            history.append(
                {
                    "step": step,
                    "n_seen": n_seen,
                    "total": res.loss.total,
                    "recon": res.loss.recon[params.n],
                    "aux": res.loss.aux,
                    "n_dead": int(tracker.mask.sum()),
                    "granularities": "/".join(map(str, step_schedule.sizes)),
                }
            )
    if history:
        log.info("trained %d steps on %d samples, final recon %.5g", len(history), n_seen, history[-1]["recon"])
    return TrainResult(params, history, tracker, state, n_seen)
