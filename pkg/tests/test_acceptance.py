"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The trained-model criteria (6-9, 11) share desk-scale models: D=64, N=1024,
K=32, 2M synthetic samples per model, three seeds, three architectures.
Training all nine takes roughly 20 minutes on one core; the parameters are
cached under ``.pytest_cache`` keyed by the package source, so reruns only
evaluate.
"""

from __future__ import annotations

import hashlib
import itertools
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

import progsae
from progsae import sae
from progsae.analysis import REFERENCE_SCALING_PARAMS, eigen_spectrum, fit_power_law, fit_scaling_law, predict_loss
from progsae.checkpoint import Checkpoint, load_checkpoint, save_checkpoint, to_bytes
from progsae.core import FormatError, sparse_decode_matmul, topk_select
from progsae.data import SuperpositionConfig, gen_superposition, read_shard, stream_superposition, write_shard
from progsae.evaluation import feature_split_analysis, fvu, progressive_frontier, rdm, rsa_score, write_frontier_csv
from progsae.matryoshka import GranularitySchedule, matryoshka_forward
from progsae.ranking import collect_stats, rank_features
from progsae.sae import SaeConfig, SaeParams, apply_permutation, init_params
from progsae.training import TrainConfig, compute_grads, train

from helpers import central_differences, frozen_residual_loss, random_params, relative_error

D, N, K = 64, 1024, 32
SIZES = (256, 512, 1024)
N_SAMPLES = 2_000_000
LR = 1e-3
SEEDS = (0, 1, 2)
N_HELD_OUT = 16_384
N_RANKING = 65_536
RSA_SAMPLES = 2000

RESULTS: dict[int, str] = {}


def report(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    RESULTS[number] = line
    print(line)
    assert passed, line


# ------------------------------------------------------------------ fixtures


def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(progsae.__file__).parent.glob("*.py")):
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


@pytest.fixture(scope="session")
def model_cache(request):
    return request.config.cache.mkdir("acceptance-models")


def schedule_for(arch: str) -> GranularitySchedule:
    if arch == "topk":
        return GranularitySchedule.plain(N, K)
    return GranularitySchedule.fixed(SIZES, K, mode="sampled" if arch == "sampled" else "fixed")


def initial_params(seed: int) -> SaeParams:
    return init_params(D, N, np.random.default_rng(seed))


@pytest.fixture(scope="session")
def trained(model_cache):
    digest = _source_digest()

    @lru_cache(maxsize=None)
    def get(arch: str, seed: int) -> SaeParams:
        path = Path(model_cache) / f"{arch}-seed{seed}-n{N_SAMPLES}-lr{LR:g}-{digest}.npz"
        if path.exists():
            with np.load(path) as z:
                return SaeParams(**{k: z[k] for k in z.files})
        start = time.perf_counter()
        stream = stream_superposition(SuperpositionConfig(d=D, seed=seed), N_SAMPLES, 1024)
        res = train(initial_params(seed), stream, schedule_for(arch), SaeConfig(N, D, K), TrainConfig(lr=LR, seed=seed))
        print(f"  trained {arch} seed {seed} in {time.perf_counter() - start:.0f}s")
        np.savez(path, **res.params.arrays())
        return res.params

    return get


@lru_cache(maxsize=None)
def held_out(seed: int) -> np.ndarray:
    # fresh samples of the same ground-truth features the model was trained on
    cfg = SuperpositionConfig(d=D, seed=1000 + seed, dictionary_seed=seed)
    return gen_superposition(cfg, N_HELD_OUT).data.astype(np.float64)


@lru_cache(maxsize=None)
def ranking_set(seed: int) -> np.ndarray:
    cfg = SuperpositionConfig(d=D, seed=2000 + seed, dictionary_seed=seed)
    return gen_superposition(cfg, N_RANKING).data.astype(np.float64)


def frontier(params: SaeParams, seed: int, gs, perm=None) -> dict[int, float]:
    pts = progressive_frontier(params, held_out(seed), gs, K, perm=perm, rsa_samples=RSA_SAMPLES)
    return {p.granularity: p.fvu for p in pts}


def orderings(params: SaeParams, seed: int):
    stats = collect_stats(params, np.array_split(ranking_set(seed), 8), K)
    return stats, {"mean_sq": rank_features(stats, "mean_sq"), "freq": rank_features(stats, "freq"), "identity": np.arange(N)}


def majority(flags) -> bool:
    return sum(flags) * 2 > len(flags)


# ------------------------------------------------------------------ 1-5


def test_c01_permutation_invariance():
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        d, n = int(rng.integers(4, 33)), int(rng.integers(8, 129))
        k = int(rng.integers(1, n + 1))
        params = random_params(d, n, rng)
        x = rng.standard_normal((int(rng.integers(1, 65)), d))
        perm = rng.permutation(n)
        _, before = sae.forward(params, x, k)
        _, after = sae.forward(apply_permutation(params, perm), x, k)
        worst = max(worst, float(np.max(np.abs(after - before)) / max(np.max(np.abs(before)), 1e-300)))
    report(1, worst <= 1e-6, f"100 triples, worst relative deviation {worst:.2e} (tol 1e-6)")


def test_c02_nested_prefix():
    rng = np.random.default_rng(102)
    ok_prefix = ok_forward = True
    for _ in range(20):
        d, n = int(rng.integers(4, 65)), 4 * int(rng.integers(2, 65))
        params = random_params(d, n, rng)
        x = rng.standard_normal((32, d))
        full = sae.pre_activation(params, x)
        for m in (n // 4, n // 2, n):
            ok_prefix &= np.array_equal(sae.pre_activation(params, x, m), full[:, :m])
        k = max(1, n // 8)
        outs = matryoshka_forward(params, x, GranularitySchedule.fixed([n // 4, n // 2, n], k))
        codes, x_hat = sae.forward(params, x, k)
        ok_forward &= np.array_equal(outs[-1].x_hat, x_hat) and np.array_equal(outs[-1].codes.indices, codes.indices)
    report(2, bool(ok_prefix and ok_forward), f"prefixes exact={ok_prefix}, m=N forward bit-identical={ok_forward}")


def test_c03_gradient_check():
    worst = {}
    for label, (d, n, sizes, k, dead) in {
        "4x6 SAE": (4, 6, [6], 2, [1, 4]),
        "6x12 Matryoshka": (6, 12, [6, 12], 4, [0, 7, 9]),
    }.items():
        for seed in range(3):
            rng = np.random.default_rng(seed)
            params = random_params(d, n, rng)
            x = rng.standard_normal((7, d))
            sched, cfg = GranularitySchedule.fixed(sizes, k), SaeConfig(n, d, k)
            mask = np.zeros(n, bool)
            mask[dead] = True
            analytic = compute_grads(params, x, sched, cfg, mask).grads
            numeric = central_differences(frozen_residual_loss(params, x, sched, cfg, mask), params)
            for name in numeric:
                err = relative_error(getattr(analytic, name), numeric[name])
                worst[f"{label}/{name}"] = max(worst.get(f"{label}/{name}", 0.0), err)
    top = max(worst, key=worst.get)
    report(3, max(worst.values()) < 1e-4, f"{len(worst)} parameter groups, worst {top} rel err {worst[top]:.1e} (tol 1e-4)")


def test_c04_kernel_oracle():
    rng = np.random.default_rng(104)
    worst = 0.0
    for _ in range(50):
        n, d, b = int(rng.integers(2, 200)), int(rng.integers(1, 64)), int(rng.integers(1, 50))
        codes = topk_select(rng.standard_normal((b, n)), int(rng.integers(0, n + 1)))
        dictionary = rng.standard_normal((n, d))
        dense = codes.to_dense() @ dictionary
        got = sparse_decode_matmul(codes, dictionary)
        worst = max(worst, float(np.max(np.abs(got - dense), initial=0.0) / max(np.max(np.abs(dense), initial=0.0), 1e-300)))
    report(4, worst <= 1e-6, f"50 instances, worst relative deviation {worst:.1e} (tol 1e-6)")


def test_c05_metric_fixtures():
    f = fvu([[1, 0], [3, 0]], [[1, 0], [1, 0]])
    a = np.random.default_rng(105).standard_normal((40, 5))
    r = rsa_score(a, 3.0 * a)
    d = rdm([[0.0], [1.0], [2.0]]).tolist()
    ok = abs(f - 2 / 3) <= 1e-9 and abs(r - 1.0) <= 1e-9 and d == [1.0, 4.0, 1.0]
    report(5, ok, f"fvu={f:.12f} (2/3), rsa(a, 3a)={r:.12f}, rdm={d}")


# ------------------------------------------------------------------ 6-9, 11 (trained models)


@pytest.mark.slow
def test_c06_power_law(trained):
    params = trained("topk", 0)
    eig = fit_power_law(eigen_spectrum(params.w_dec), (0.05, 0.8), "eigvals")
    stats, _ = orderings(params, 0)
    act2 = fit_power_law(stats.mean_sq_act, (0.05, 0.8), "act2")
    freq = fit_power_law(stats.fire_freq, (0.05, 0.8), "freq")
    print(f"  eigenvalues: alpha={eig.exponent:.3f} r2={eig.r2:.3f}")
    print(f"  E[act^2]:    alpha={act2.exponent:.3f} r2={act2.r2:.3f}")
    print(f"  frequency:   alpha={freq.exponent:.3f} r2={freq.r2:.3f}")
    print(f"  dead tail: {act2.n_excluded_zeros} of {N} features never fired on {N_RANKING} samples (excluded from both fits)")
    ok = eig.exponent < -0.2 and eig.r2 >= 0.8 and act2.exponent < freq.exponent
    report(
        6,
        ok,
        f"eigen alpha={eig.exponent:.3f} (<-0.2) r2={eig.r2:.3f} (>=0.8); act2 alpha {act2.exponent:.2f} steeper than freq {freq.exponent:.2f}",
    )


@pytest.mark.slow
def test_c07_ranking(trained):
    gs = (64, 128, 256, 512)
    verdicts, lines = [], []
    for seed in SEEDS:
        params = trained("topk", seed)
        _, perms = orderings(params, seed)
        f = {name: frontier(params, seed, gs, perm) for name, perm in perms.items()}
        ok = all(f["mean_sq"][g] <= f["freq"][g] + 0.01 and f["freq"][g] <= f["identity"][g] + 0.01 for g in gs)
        verdicts.append(ok)
        cells = ", ".join(f"g={g}: {f['mean_sq'][g]:.3f}/{f['freq'][g]:.3f}/{f['identity'][g]:.3f}" for g in gs)
        lines.append(f"  seed {seed} {'ok ' if ok else 'bad'} mean_sq/freq/identity {cells}")
    print("\n".join(lines))
    report(7, majority(verdicts), f"mean_sq <= freq <= identity (+0.01) at {list(gs)} in {sum(verdicts)}/3 seeds")


@pytest.mark.slow
def test_c08_matryoshka_frontier(trained):
    verdicts, lines = [], []
    for seed in SEEDS:
        base = trained("topk", seed)
        _, perms = orderings(base, seed)
        fb = frontier(base, seed, SIZES, perms["mean_sq"])
        fm = frontier(trained("matryoshka", seed), seed, SIZES)
        below = fm[256] < fb[256] and fm[512] < fb[512]
        close = abs(fm[N] - fb[N]) <= 0.05
        verdicts.append(below and close)
        lines.append(
            f"  seed {seed}: matryoshka/permuted-baseline FVU g=256 {fm[256]:.4f}/{fb[256]:.4f}, "
            f"g=512 {fm[512]:.4f}/{fb[512]:.4f}, g=N {fm[N]:.4f}/{fb[N]:.4f}"
        )
    print("\n".join(lines))
    report(8, majority(verdicts), f"strictly lower at 256 and 512 and |diff| <= 0.05 at N in {sum(verdicts)}/3 seeds")


@pytest.mark.slow
def test_c09_sampled(trained):
    gs = (128, 384, 768)
    verdicts, lines = [], []
    for seed in SEEDS:
        fs = frontier(trained("sampled", seed), seed, gs)
        ff = frontier(trained("matryoshka", seed), seed, gs)
        wins = sum(fs[g] <= ff[g] for g in gs)
        verdicts.append(wins / len(gs) >= 0.6)
        lines.append(f"  seed {seed}: sampled/fixed " + ", ".join(f"g={g}: {fs[g]:.4f}/{ff[g]:.4f}" for g in gs) + f" -> {wins}/3")
    print("\n".join(lines))
    report(9, majority(verdicts), f"sampled <= fixed at >= 60% of {list(gs)} in {sum(verdicts)}/3 seeds")


@pytest.mark.slow
def test_c11_feature_splitting(trained):
    edges = SIZES[:-1]
    mat = feature_split_analysis(trained("matryoshka", 0).w_dec, 5, edges)
    rand = feature_split_analysis(initial_params(0).w_dec, 5, edges)
    print(f"  matryoshka block means {np.round(mat.block_means, 1).tolist()}, max jump {mat.max_block_jump():.1f}")
    print(f"  random init block means {np.round(rand.block_means, 1).tolist()}, max jump {rand.max_block_jump():.1f}")
    ok = mat.max_block_jump() > 3.0 * rand.max_block_jump()
    report(11, ok, f"block-mean jump {mat.max_block_jump():.1f} vs 3x random-init variation {3 * rand.max_block_jump():.1f}")


# ------------------------------------------------------------------ 10, 12


def test_c10_scaling_law():
    rows = [(n, k, g) for n in (16384, 32768, 65536) for k in (64, 128, 256, 512) for g in (5000, 10000, 20000, 40000, 65536) if g <= n]
    n, k, g = np.array(rows, dtype=float).T
    clean = predict_loss(REFERENCE_SCALING_PARAMS, n, k, g)
    noisy = clean * np.exp(np.random.default_rng(110).normal(0.0, 0.01, clean.size))

    def r2(fit, target):
        resid = np.log(predict_loss(fit.params, n, k, g)) - np.log(target)
        centered = np.log(target) - np.log(target).mean()
        return 1.0 - resid @ resid / (centered @ centered)

    r_clean = r2(fit_scaling_law(n, k, g, clean), clean)
    r_noisy = r2(fit_scaling_law(n, k, g, noisy), noisy)
    report(10, r_clean >= 0.999 and r_noisy >= 0.99, f"noiseless r2={r_clean:.6f} (>=0.999), 1% noise r2={r_noisy:.5f} (>=0.99)")


def test_c12_determinism_and_io(tmp_path):
    cfg = SuperpositionConfig(n_true=256, d=16, p_active=0.02, seed=12)
    checks = {}
    runs = itertools.count()

    def run():
        params = init_params(16, 64, np.random.default_rng(12))
        sched = GranularitySchedule.fixed([16, 32, 64], 8, mode="sampled")
        res = train(params, stream_superposition(cfg, 8192, 512), sched, SaeConfig(64, 16, 8), TrainConfig(lr=1e-3, seed=12))
        ck = Checkpoint(res.params, SaeConfig(64, 16, 8), sched, collect_stats(res.params, [gen_superposition(cfg, 2048).data], 8))
        x = gen_superposition(SuperpositionConfig(**{**cfg.to_dict(), "seed": 13, "dictionary_seed": 12}), 1024).data
        path = tmp_path / f"frontier{next(runs)}.csv"
        write_frontier_csv(path, progressive_frontier(res.params, x, [16, 32, 64], 8, rsa_samples=500))
        return to_bytes(ck), path.read_bytes(), ck

    a_ck, a_csv, ck = run()
    checks["same seed, same checkpoint"] = a_ck == run()[0]
    checks["same seed, same CSV"] = a_csv == run()[1]

    shard = gen_superposition(cfg, 777)
    write_shard(tmp_path / "s.saea", shard)
    checks["shard round-trip"] = read_shard(tmp_path / "s.saea").data.tobytes() == shard.data.tobytes()
    save_checkpoint(tmp_path / "m.psae", ck)
    save_checkpoint(tmp_path / "m2.psae", load_checkpoint(tmp_path / "m.psae"))
    checks["checkpoint round-trip"] = (tmp_path / "m.psae").read_bytes() == (tmp_path / "m2.psae").read_bytes() == a_ck

    raw_shard = (tmp_path / "s.saea").read_bytes()
    raw_ck = (tmp_path / "m.psae").read_bytes()
    corrupt = {
        "shard magic": (b"SAEX" + raw_shard[4:], read_shard),
        "shard truncated": (raw_shard[:-1], read_shard),
        "shard big-endian": (b"SAEA" + (1).to_bytes(4, "big") + raw_shard[8:], read_shard),
        "checkpoint magic": (b"XSAE" + raw_ck[4:], load_checkpoint),
        "checkpoint version": (raw_ck[:4] + (9).to_bytes(4, "little") + raw_ck[8:], load_checkpoint),
        "checkpoint truncated": (raw_ck[: len(raw_ck) // 2], load_checkpoint),
        "checkpoint trailing": (raw_ck + b"\0", load_checkpoint),
    }
    for label, (payload, reader) in corrupt.items():
        path = tmp_path / "bad.bin"
        path.write_bytes(payload)
        try:
            reader(path)
            checks[f"{label} rejected"] = False
        except FormatError:
            checks[f"{label} rejected"] = True
    failed = [name for name, ok in checks.items() if not ok]
    report(12, not failed, f"{len(checks)} checks" + (f", failed: {failed}" if failed else ", all bit-exact / rejected as expected"))
