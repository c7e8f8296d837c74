"""Dictionary power-law diagnostics and the granularity scaling law."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from os import PathLike
from typing import Sequence

import numpy as np

from .core import ols_loglog, sym_eigvals

SCALING_PARAM_NAMES = ("alpha", "beta_k", "beta_n", "beta_g", "gamma_n", "gamma_g", "zeta", "eta")


class ScalingFitError(RuntimeError):
    """No start of the scaling-law fit converged; ``best`` holds the best iterate."""

    def __init__(self, message: str, best: "ScalingFit"):
        super().__init__(message)
        self.best = best


class DegenerateFitWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PowerLawFit:
    exponent: float
    intercept: float
    r2: float
    fit_range: tuple[float, float]
    n_excluded_zeros: int = 0
    n_points: int = 0
    criterion: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fit_range"] = list(self.fit_range)
        return d


@dataclass(frozen=True)
class ScalingLawParams:
    alpha: float
    beta_k: float
    beta_n: float
    beta_g: float
    gamma_n: float
    gamma_g: float
    zeta: float
    eta: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in SCALING_PARAM_NAMES])

    @classmethod
    def from_array(cls, v) -> "ScalingLawParams":
        return cls(*(float(x) for x in v))


# reference parameters for 16k/32k/65k-latent TopK SAEs
REFERENCE_SCALING_PARAMS = ScalingLawParams(
    alpha=-3.60, beta_k=0.69, beta_n=0.19, beta_g=0.08, gamma_n=0.02, gamma_g=-0.10, zeta=-2.13, eta=-0.13
)


def eigen_spectrum(w_dec) -> np.ndarray:
    """Descending eigenvalues of the (D, D) covariance of the decoder rows, population normalised."""
    w = np.asarray(w_dec, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 2:
        raise ValueError("eigen_spectrum needs a decoder with at least two rows")
    wc = w - w.mean(axis=0)
    cov = wc.T @ wc / w.shape[0]
    vals = sym_eigvals(0.5 * (cov + cov.T))
    if vals.size and vals[-1] < -1e-9 * max(1.0, vals[0]):
        raise ValueError(f"covariance has a negative eigenvalue {vals[-1]:.3g}")
    return np.maximum(vals, 0.0)


def fit_power_law(values, trim: tuple[float, float] = (0.0, 1.0), criterion: str = "") -> PowerLawFit:
    """Log-log fit of value against 1-based rank.

    Zeros are dropped first (and counted); the remaining values are sorted
    descending and only ranks in ``[floor(lo * n), floor(hi * n))`` enter the fit.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise ValueError("fit_power_law expects finite nonnegative values")
    positive = np.sort(v[v > 0])[::-1]
    n_zero = int(v.size - positive.size)
    lo, hi = trim
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError(f"invalid trim range {trim}")
    start, stop = int(np.floor(lo * positive.size)), int(np.floor(hi * positive.size))
    if stop - start < 10:
        raise ValueError(f"only {stop - start} positive values inside the trim range; need 10")
    ranks = np.arange(start + 1, stop + 1, dtype=np.float64)
    fit = ols_loglog(ranks, positive[start:stop])
    return PowerLawFit(fit.slope, fit.intercept, fit.r2, (float(lo), float(hi)), n_zero, stop - start, criterion)


def _design(n, k, g):
    lk, ln, lg = np.log(k), np.log(n), np.log(g)
    main = np.column_stack([np.ones_like(lk), lk, ln, lg, lk * ln, lk * lg])
    irr = np.column_stack([np.ones_like(lk), lk])
    return main, irr


def predict_loss(params: ScalingLawParams, n, k, g):
    """``exp(alpha + b_k lk + b_n ln + b_g lg + g_n lk ln + g_g lk lg) + exp(zeta + eta lk)``."""
    n, k, g = (np.asarray(a, dtype=np.float64) for a in (n, k, g))
    if np.any(n < 1) or np.any(k < 1) or np.any(g < 1):
        raise ValueError("n, k and g must be at least 1")
    main, irr = _design(np.atleast_1d(n), np.atleast_1d(k), np.atleast_1d(g))
    theta = params.as_array()
    out = np.exp(main @ theta[:6]) + np.exp(irr @ theta[6:])
    return float(out[0]) if np.ndim(n) == np.ndim(k) == np.ndim(g) == 0 else out.reshape(np.broadcast(n, k, g).shape)


@dataclass
class ScalingFit:
    params: ScalingLawParams
    r2: float
    objective: float
    n_iter: int
    converged: bool
    degenerate: bool = False
    start_objectives: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": asdict(self.params),
            "r2": self.r2,
            "objective": self.objective,
            "n_iter": self.n_iter,
            "converged": self.converged,
            "degenerate": self.degenerate,
            "start_objectives": self.start_objectives,
        }


def _whitener(a: np.ndarray):
    """Map ``theta = t(u)`` with ``a @ theta`` orthonormal in ``u``; returns (t, rank)."""
    u_, s, vt = np.linalg.svd(a, full_matrices=False)
    keep = s > s[0] * 1e-10
    basis = vt[keep].T / s[keep]
    return basis, int(keep.sum())


def _objective_and_grad(u, basis_main, basis_irr, offset_main, offset_irr, a_main, a_irr, log_y):
    theta_main = offset_main + basis_main @ u[: basis_main.shape[1]]
    theta_irr = offset_irr + basis_irr @ u[basis_main.shape[1] :]
    e1 = np.exp(a_main @ theta_main)
    e2 = np.exp(a_irr @ theta_irr)
    pred = e1 + e2
    resid = np.log(pred) - log_y
    obj = float(resid @ resid)
    w = 2.0 * resid / pred
    g_main = basis_main.T @ (a_main.T @ (w * e1))
    g_irr = basis_irr.T @ (a_irr.T @ (w * e2))
    return obj, np.concatenate([g_main, g_irr]), theta_main, theta_irr


def _descend(u, args, max_iter, tol):
    step = 1e-2
    obj, grad, tm, ti = _objective_and_grad(u, *args)
    for it in range(1, max_iter + 1):
        cand = u - step * grad
        c_obj, c_grad, c_tm, c_ti = _objective_and_grad(cand, *args)
        if np.isfinite(c_obj) and c_obj <= obj:
            converged = obj - c_obj <= tol * (1.0 + obj)
            u, obj, grad, tm, ti = cand, c_obj, c_grad, c_tm, c_ti
            step *= 1.2
            if converged:
                return u, obj, tm, ti, it, True
        else:
            step *= 0.5
            if step < 1e-18:
                return u, obj, tm, ti, it, True
    return u, obj, tm, ti, max_iter, False


def fit_scaling_law(
    n,
    k,
    g,
    loss,
    n_starts: int = 8,
    seed: int = 0,
    max_iter: int = 50_000,
    tol: float = 1e-10,
) -> ScalingFit:
    """Least squares in log space for the eight scaling-law parameters.

    Full-batch gradient descent with an adaptive step (grow on success, halve
    on increase). Both linear predictors are whitened by SVD so the descent is
    well conditioned; the map back to the eight named parameters is exact.
    Rank-deficient designs (e.g. a single ``k``) fit with a warning and
    ``degenerate=True``.
    """
    n, k, g, loss = (np.asarray(a, dtype=np.float64).ravel() for a in (n, k, g, loss))
    if not (n.size == k.size == g.size == loss.size):
        raise ValueError("observation arrays must have equal length")
    if n.size < 9:
        raise ValueError("need at least 9 observations")
    if np.any(loss <= 0):
        raise ValueError("losses must be positive")
    a_main, a_irr = _design(n, k, g)
    log_y = np.log(loss)
    basis_main, rank_main = _whitener(a_main)
    basis_irr, rank_irr = _whitener(a_irr)
    degenerate = rank_main < a_main.shape[1] or rank_irr < a_irr.shape[1]
    if degenerate:
        warnings.warn(
            f"scaling-law design is rank deficient (main rank {rank_main}/6, irreducible rank {rank_irr}/2); "
            "some parameters are not identifiable",
            DegenerateFitWarning,
            stacklevel=2,
        )
    # start 0: main term by OLS on log loss, irreducible term well below it
    ols_main, *_ = np.linalg.lstsq(a_main, log_y, rcond=None)
    offset_irr0 = np.array([log_y.min() - 2.0, 0.0])
    rng = np.random.default_rng(seed)
    best = None
    any_converged = False
    start_objs = []
    for start in range(n_starts):
        if start == 0:
            off_main, off_irr = ols_main, offset_irr0
        else:
            off_main = ols_main + rng.normal(0.0, 0.5, 6) * np.array([1.0, 0.3, 0.1, 0.1, 0.03, 0.03])
            off_irr = np.array([log_y.min() + rng.uniform(-4.0, 0.0), rng.normal(0.0, 0.3)])
        args = (basis_main, basis_irr, off_main, off_irr, a_main, a_irr, log_y)
        u0 = np.zeros(rank_main + rank_irr)
        _, obj, tm, ti, n_iter, converged = _descend(u0, args, max_iter, tol)
        start_objs.append(obj)
        any_converged |= converged
        if best is None or obj < best[0]:
            best = (obj, tm, ti, n_iter, converged)
    obj, tm, ti, n_iter, converged = best
    params = ScalingLawParams.from_array(np.concatenate([tm, ti]))
    ss_tot = float(np.sum((log_y - log_y.mean()) ** 2))
    r2 = 1.0 - obj / ss_tot if ss_tot > 0 else 1.0
    fit = ScalingFit(params, float(r2), obj, n_iter, converged, degenerate, start_objs)
    if not any_converged:
        raise ScalingFitError(f"no start converged within {max_iter} iterations (best objective {obj:.3g})", fit)
    return fit


def write_json(path: str | PathLike, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
