"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked at import time from ``PSAE_KERNELS`` (``numba`` or
``numpy``); numba is used when importable and not disabled. ``set_backend``
and ``use_backend`` switch at runtime, which the tests and the benchmark use
to run both paths on the same inputs.

Every kernel takes float64 C-contiguous arrays and returns float64 results.
"""

from __future__ import annotations

import contextlib
import math
import os

import numpy as np
import scipy.sparse

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

BACKENDS = ("numba", "numpy")

if numba is not None:
    if "NUMBA_THREADING_LAYER" not in os.environ:
        # skip the TBB probe, it warns on older system TBB builds
        numba.config.THREADING_LAYER = "workqueue"
    _threads = os.environ.get("PSAE_THREADS")
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


def _default_backend() -> str:
    requested = os.environ.get("PSAE_KERNELS", "numba").strip().lower()
    if requested not in BACKENDS:
        raise ValueError(f"PSAE_KERNELS must be one of {BACKENDS}, got {requested!r}")
    if requested == "numba" and numba is None:
        return "numpy"
    return requested


_backend = _default_backend()


def backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    _backend = name


@contextlib.contextmanager
def use_backend(name: str):
    previous = _backend
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _encode_dense_np(xc, w, bias, g):
    # one axpy per input dim: each output entry sums bias, then d = 0..D-1 in order,
    # so a width-g result is bitwise the prefix of any wider one
    out = np.empty((xc.shape[0], g))
    out[:] = bias[:g]
    wg = w[:, :g]
    for d in range(xc.shape[1]):
        out += xc[:, d : d + 1] * wg[d]
    return out


def _topk_rows_np(p, k):
    b, n = p.shape
    if k == 0:
        return np.empty((b, 0), dtype=np.int64), np.empty((b, 0))
    thr = np.partition(p, n - k, axis=1)[:, n - k : n - k + 1]
    above = p > thr
    tied = p == thr
    need = k - above.sum(axis=1, keepdims=True)
    keep = above | (tied & (np.cumsum(tied, axis=1) <= need))
    rows, cols = np.nonzero(keep)
    idx = cols.reshape(b, k).astype(np.int64)
    return idx, np.take_along_axis(p, idx, axis=1)


def _sparse_decode_np(idx, vals, dictionary):
    if idx.shape[1] == 0:
        return np.zeros((idx.shape[0], dictionary.shape[1]))
    return np.einsum("bk,bkd->bd", vals, dictionary[idx])


def _sparse_scatter_rows_np(idx, vals, grad, n):
    b, k = idx.shape
    # CSR sums repeated indices, matching the accumulate loop of the numba kernel
    z = scipy.sparse.csr_matrix((vals.ravel(), idx.ravel(), np.arange(0, b * k + 1, k)), shape=(b, n))
    return np.asarray(z.T @ grad)


def _sparse_gather_dot_np(idx, grad, dictionary):
    if idx.shape[1] == 0:
        return np.zeros(idx.shape)
    return np.einsum("bd,bkd->bk", grad, dictionary[idx])


def _jacobi_rotate_np(a, p, q):
    apq = a[p, q]
    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
    t = np.sign(theta) / (abs(theta) + math.hypot(theta, 1.0)) if theta != 0 else 1.0
    c = 1.0 / np.sqrt(t * t + 1.0)
    s = t * c
    ap = a[:, p].copy()
    aq = a[:, q].copy()
    a[:, p] = c * ap - s * aq
    a[:, q] = s * ap + c * aq
    rp = a[p, :].copy()
    rq = a[q, :].copy()
    a[p, :] = c * rp - s * rq
    a[q, :] = s * rp + c * rq
    a[p, q] = 0.0
    a[q, p] = 0.0


def _jacobi_eigvals_np(m, tol, max_sweeps):
    a = m.copy()
    n = a.shape[0]
    scale = np.sqrt(np.sum(a * a))
    if scale == 0.0:
        return np.zeros(n)
    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a[offdiag] ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) > 1e-300:
                    _jacobi_rotate_np(a, p, q)
    return np.diag(a).copy()


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if numba is not None:
    from numba import njit, prange

    @njit(parallel=True, cache=True)
    def _encode_dense_nb(xc, w, bias, g):
        b, d_in = xc.shape
        out = np.empty((b, g))
        for i in prange(b):
            row = out[i]
            for j in range(g):
                row[j] = bias[j]
            for d in range(d_in):
                a = xc[i, d]
                wd = w[d]
                for j in range(g):
                    row[j] += a * wd[j]
        return out

    @njit(parallel=True, cache=True)
    def _topk_rows_nb(p, k):
        b, n = p.shape
        idx = np.empty((b, k), dtype=np.int64)
        vals = np.empty((b, k))
        if k == 0:
            return idx, vals
        for i in prange(b):
            row = p[i]
            thr = np.partition(row.copy(), n - k)[n - k]
            n_above = 0
            for j in range(n):
                if row[j] > thr:
                    n_above += 1
            need = k - n_above
            c = 0
            for j in range(n):
                v = row[j]
                if v > thr or (v == thr and need > 0):
                    if v == thr:
                        need -= 1
                    idx[i, c] = j
                    vals[i, c] = v
                    c += 1
        return idx, vals

    @njit(parallel=True, cache=True)
    def _sparse_decode_nb(idx, vals, dictionary):
        b, k = idx.shape
        d = dictionary.shape[1]
        out = np.zeros((b, d))
        for i in prange(b):
            for j in range(k):
                v = vals[i, j]
                row = dictionary[idx[i, j]]
                for c in range(d):
                    out[i, c] += v * row[c]
        return out

    @njit(cache=True)
    def _sparse_scatter_rows_nb(idx, vals, grad, n):
        b, k = idx.shape
        d = grad.shape[1]
        out = np.zeros((n, d))
        for i in range(b):
            for j in range(k):
                v = vals[i, j]
                row = out[idx[i, j]]
                for c in range(d):
                    row[c] += v * grad[i, c]
        return out

    @njit(parallel=True, cache=True)
    def _sparse_gather_dot_nb(idx, grad, dictionary):
        b, k = idx.shape
        d = grad.shape[1]
        out = np.zeros((b, k))
        for i in prange(b):
            for j in range(k):
                row = dictionary[idx[i, j]]
                acc = 0.0
                for c in range(d):
                    acc += grad[i, c] * row[c]
                out[i, j] = acc
        return out

    @njit(cache=True)
    def _jacobi_eigvals_nb(m, tol, max_sweeps):
        a = m.copy()
        n = a.shape[0]
        scale = np.sqrt(np.sum(a * a))
        if scale == 0.0:
            return np.zeros(n)
        for _ in range(max_sweeps):
            off = 0.0
            for p in range(n):
                for q in range(n):
                    if p != q:
                        off += a[p, q] * a[p, q]
            if np.sqrt(off) <= tol * scale:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if abs(apq) <= 1e-300:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if theta != 0.0:
                        t = np.sign(theta) / (abs(theta) + math.hypot(theta, 1.0))
                    else:
                        t = 1.0
                    c = 1.0 / np.sqrt(t * t + 1.0)
                    s = t * c
                    for r in range(n):
                        arp = a[r, p]
                        arq = a[r, q]
                        a[r, p] = c * arp - s * arq
                        a[r, q] = s * arp + c * arq
                    for r in range(n):
                        apr = a[p, r]
                        aqr = a[q, r]
                        a[p, r] = c * apr - s * aqr
                        a[q, r] = s * apr + c * aqr
                    a[p, q] = 0.0
                    a[q, p] = 0.0
        out = np.empty(n)
        for i in range(n):
            out[i] = a[i, i]
        return out


_IMPLS = {
    "numpy": {
        "encode_dense": _encode_dense_np,
        "topk_rows": _topk_rows_np,
        "sparse_decode": _sparse_decode_np,
        "sparse_scatter_rows": _sparse_scatter_rows_np,
        "sparse_gather_dot": _sparse_gather_dot_np,
        "jacobi_eigvals": _jacobi_eigvals_np,
    },
}
if numba is not None:
    _IMPLS["numba"] = {
        "encode_dense": _encode_dense_nb,
        "topk_rows": _topk_rows_nb,
        "sparse_decode": _sparse_decode_nb,
        "sparse_scatter_rows": _sparse_scatter_rows_nb,
        "sparse_gather_dot": _sparse_gather_dot_nb,
        "jacobi_eigvals": _jacobi_eigvals_nb,
    }


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def encode_dense(xc, w, bias, g: int) -> np.ndarray:
    """``bias[:g] + xc @ w[:, :g]`` with a fixed per-entry summation order."""
    return _IMPLS[_backend]["encode_dense"](_f64(xc), _f64(w), _f64(bias), int(g))


def topk_rows(p, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise k largest values; ties go to the lower column, indices ascending."""
    return _IMPLS[_backend]["topk_rows"](_f64(p), int(k))


def sparse_decode(idx, vals, dictionary) -> np.ndarray:
    return _IMPLS[_backend]["sparse_decode"](
        np.ascontiguousarray(idx, dtype=np.int64), _f64(vals), _f64(dictionary)
    )


def sparse_scatter_rows(idx, vals, grad, n: int) -> np.ndarray:
    """Transpose of ``sparse_decode``: accumulates ``vals[b, j] * grad[b]`` into row ``idx[b, j]``."""
    return _IMPLS[_backend]["sparse_scatter_rows"](
        np.ascontiguousarray(idx, dtype=np.int64), _f64(vals), _f64(grad), int(n)
    )


def sparse_gather_dot(idx, grad, dictionary) -> np.ndarray:
    return _IMPLS[_backend]["sparse_gather_dot"](
        np.ascontiguousarray(idx, dtype=np.int64), _f64(grad), _f64(dictionary)
    )


def jacobi_eigvals(m, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    return _IMPLS[_backend]["jacobi_eigvals"](_f64(m), float(tol), int(max_sweeps))
