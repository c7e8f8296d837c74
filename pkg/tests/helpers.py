"""Shared oracles for the test suite."""

import numpy as np

from progsae import sae
from progsae.matryoshka import matryoshka_forward
from progsae.sae import SaeParams


def random_params(d, n, rng, scale=1.0):
    """Untied random parameters with nonzero biases, so every gradient path is exercised."""
    return SaeParams(
        w_enc=rng.standard_normal((d, n)) * scale,
        w_dec=rng.standard_normal((n, d)) * scale,
        b_center=rng.standard_normal(d) * 0.3,
        b_enc=rng.standard_normal(n) * 0.3,
    )


def frozen_residual_loss(params, x, schedule, cfg, dead_mask):
    """Loss as a function of params with the aux residual evaluated at ``params`` and then held fixed.

    Returns a closure over perturbed parameters, suitable for finite differences.
    """
    x = np.asarray(x, dtype=np.float64)
    base = matryoshka_forward(params, x, schedule)
    residual = x - base[-1].x_hat

    def loss(p):
        outs = matryoshka_forward(p, x, schedule)
        total = sum(c * sae.recon_loss(x, o.x_hat) for o, c in zip(outs, schedule.weights))
        if cfg.sparsity_coeff:
            total += cfg.sparsity_coeff * sae.sparsity_penalty(outs[-1].codes)
        if np.any(dead_mask):
            pre = sae.pre_activation(p, x)
            total += cfg.aux_scale * sae.aux_terms(p, pre, residual, dead_mask).value
        return total

    return loss


def central_differences(loss, params, eps=1e-6):
    out = {}
    for name, arr in params.arrays().items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + eps
            up = loss(params)
            arr[idx] = old - eps
            down = loss(params)
            arr[idx] = old
            g[idx] = (up - down) / (2 * eps)
        out[name] = g
    return out


def relative_error(analytic, numeric):
    den = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / den)
