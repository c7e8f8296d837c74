"""Time the numba kernels against the numpy fallback on desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat 5] [--batch 1024]

Prints one line per kernel with the best-of-``repeat`` wall time of each
backend and the speedup. The first numba call of each kernel (compilation or
cache load) is excluded.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from progsae import _kernels
from progsae.data import SuperpositionConfig, gen_superposition
from progsae.matryoshka import GranularitySchedule
from progsae.sae import SaeConfig, init_params
from progsae.training import compute_grads


def best_time(fn, repeat: int) -> float:
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(batch: int, d: int, n: int, k: int):
    rng = np.random.default_rng(0)
    xc = rng.standard_normal((batch, d))
    w = rng.standard_normal((d, n))
    bias = rng.standard_normal(n)
    pre = xc @ w + bias
    idx, vals = _kernels.topk_rows(pre, k)
    dictionary = rng.standard_normal((n, d))
    grad = rng.standard_normal((batch, d))
    sym = rng.standard_normal((d, d))
    sym = sym + sym.T
    params = init_params(d, n, rng)
    x = gen_superposition(SuperpositionConfig(d=d, seed=0), batch).data.astype(np.float64)
    sched = GranularitySchedule.fixed([n // 4, n // 2, n], k)
    cfg = SaeConfig(n=n, d=d, k=k)
    return {
        "encode_dense": lambda: _kernels.encode_dense(xc, w, bias, n),
        "topk_rows": lambda: _kernels.topk_rows(pre, k),
        "sparse_decode": lambda: _kernels.sparse_decode(idx, vals, dictionary),
        "sparse_scatter_rows": lambda: _kernels.sparse_scatter_rows(idx, vals, grad, n),
        "sparse_gather_dot": lambda: _kernels.sparse_gather_dot(idx, grad, dictionary),
        "jacobi_eigvals": lambda: _kernels.jacobi_eigvals(sym),
        "train_step (matryoshka)": lambda: compute_grads(params, x, sched, cfg),
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=1024)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--n", type=int, default=1024)
    ap.add_argument("--k", type=int, default=32)
    args = ap.parse_args()
    if _kernels.numba is None:
        raise SystemExit("numba is not installed; nothing to compare")
    print(f"batch={args.batch} d={args.d} n={args.n} k={args.k}, best of {args.repeat}")
    print(f"{'kernel':<26}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    fns = cases(args.batch, args.d, args.n, args.k)
    for name, fn in fns.items():
        with _kernels.use_backend("numpy"):
            t_np = best_time(fn, args.repeat)
        with _kernels.use_backend("numba"):
            t_nb = best_time(fn, args.repeat)
        print(f"{name:<26}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
