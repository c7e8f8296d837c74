"""Command-line entry point: ``progsae <command> --out-dir DIR ...``.

Every command writes its outputs plus one ``manifest.json`` into ``--out-dir``.
Exit status is 0 on success, 1 when a library call fails (bad file, fit
failure, divergence) and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .analysis import ScalingFitError, eigen_spectrum, fit_power_law, fit_scaling_law, write_json
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import ActivationShard, SuperpositionConfig, batch_iter, gen_superposition, read_raw_f32, read_shard, write_shard
from .evaluation import feature_split_analysis, progressive_frontier, sparsity_frontier, write_frontier_csv, write_frontier_json
from .matryoshka import GranularitySchedule
from .ranking import FeatureStats, collect_stats, rank_features, write_permutation
from .sae import SaeConfig, apply_permutation, init_params
from .training import DivergenceError, TrainConfig, train

log = logging.getLogger("progsae")

CSV_SCHEMAS = """output files:
  gen-data      activations.saea        SAEA shard: b"SAEA", u32 version, u64 n_samples, u32 dim, f32 rows
  train         model.psae, train_log.csv (step,n_seen,total,recon,aux,n_dead,granularities)
  frontier      progressive.csv, sparsity.csv (model_id,granularity,k,fvu,rsa), frontier.json
  permute       permutation.txt (one feature id per line, most important first), model.psae
  fit-powerlaw  powerlaw.json {criterion, exponent, intercept, r2, fit_range, n_excluded_zeros, n_points}
  fit-scaling   scaling.json {params: {alpha..eta}, r2, ...}; input CSV columns n,k,g,loss
  splitting     splitting.csv (feature,mean_index,neighbors), splitting_blocks.json
each command also writes manifest.json into --out-dir."""


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}")
    return float(parts[0]), float(parts[1])


def _named_path(text: str) -> tuple[str, str]:
    name, sep, path = text.partition("=")
    return (name, path) if sep else (Path(text).stem, text)


def _load_data(args) -> ActivationShard:
    if args.raw_dim:
        shard = read_raw_f32(args.data, args.raw_dim)
    else:
        shard = read_shard(args.data)
    if getattr(args, "n_samples", None):
        shard = ActivationShard(shard.data[: args.n_samples], shard.provenance)
    return shard


def _add_data_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--data", required=required, help="SAEA shard, or a raw little-endian f32 file with --raw-dim")
    p.add_argument("--raw-dim", type=int, default=0, help="read --data as headerless f32 rows of this width")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, out: Path) -> dict:
    cfg = SuperpositionConfig(
        n_true=args.n_true,
        d=args.d,
        p_active=args.p_active,
        importance_exponent=args.exponent,
        noise_std=args.noise_std,
        seed=args.seed,
        dictionary_seed=args.dictionary_seed,
        signal_power=args.signal_power,
    )
    shard = gen_superposition(cfg, args.n_samples)
    write_shard(out / "activations.saea", shard)
    return {"config": cfg.to_dict(), "outputs": ["activations.saea"]}


def _schedule(args) -> tuple[GranularitySchedule, int]:
    sizes = sorted(set(args.sizes))
    if not sizes or sizes[0] < 1:
        raise UsageError("--sizes must be positive integers")
    n = sizes[-1]
    if args.k > n:
        raise UsageError(f"--k {args.k} exceeds the largest granularity {n}")
    if args.k < 1:
        raise UsageError("--k must be at least 1")
    if args.arch == "topk":
        return GranularitySchedule.plain(n, args.k), n
    if args.weights is not None and len(args.weights) != len(sizes):
        raise UsageError("--weights needs one value per size")
    mode = "sampled" if args.arch == "matryoshka-sampled" else "fixed"
    return GranularitySchedule.fixed(sizes, args.k, args.weights, mode=mode), n


def cmd_train(args, out: Path) -> dict:
    schedule, n = _schedule(args)
    if args.aux_scale < 0:
        raise UsageError("--aux-scale must be nonnegative")
    try:
        train_cfg = TrainConfig(
            lr=args.lr,
            weight_decay=args.weight_decay,
            beta1=args.beta1,
            beta2=args.beta2,
            eps=args.eps,
            batch_size=args.batch_size,
            n_tokens=args.n_tokens,
            dead_window=args.dead_window,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    shard = _load_data(args)
    sae_cfg = SaeConfig(
        n=n,
        d=shard.dim,
        k=args.k,
        unit_norm_decoder=not args.free_decoder_norm,
        aux_scale=args.aux_scale,
        sparsity_coeff=args.sparsity_coeff,
    )
    params = init_params(shard.dim, n, np.random.default_rng(args.seed))
    stream = batch_iter(shard, args.batch_size, shuffle_seed=args.seed)
    res = train(params, stream, schedule, sae_cfg, train_cfg, log_every=args.log_every)
    meta = {"arch": args.arch, "seed": args.seed, "n_seen": res.n_seen, "train": train_cfg.to_dict()}
    save_checkpoint(out / "model.psae", Checkpoint(res.params, sae_cfg, schedule, None, meta))
    with open(out / "train_log.csv", "w", newline="") as fh:
        fields = ("step", "n_seen", "total", "recon", "aux", "n_dead", "granularities")
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in res.log:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    final = res.log[-1] if res.log else {}
    return {
        "config": {"arch": args.arch, "sizes": list(schedule.sizes), "k": args.k, "sae": vars(sae_cfg), "train": train_cfg.to_dict()},
        "inputs": [os.fspath(args.data)],
        "outputs": ["model.psae", "train_log.csv"],
        "summary": {"n_seen": res.n_seen, "final_recon": final.get("recon"), "n_dead": final.get("n_dead")},
    }


def cmd_frontier(args, out: Path) -> dict:
    models = [(name, load_checkpoint(path)) for name, path in args.model]
    x = _load_data(args).data.astype(np.float64)
    progressive, full = [], []
    for name, ck in models:
        k = args.k if args.k else ck.config.k
        gs = args.granularities or list(ck.schedule.sizes)
        bad = [g for g in gs if not 1 <= g <= ck.params.n]
        if bad:
            raise UsageError(f"granularities {bad} outside [1, {ck.params.n}] for model {name}")
        if k > ck.params.n:
            raise UsageError(f"--k {k} exceeds the width {ck.params.n} of model {name}")
        progressive += progressive_frontier(ck.params, x, gs, k, name, rsa_samples=args.rsa_samples)
    full = sparsity_frontier([(name, ck.params, args.k or ck.config.k) for name, ck in models], x, args.rsa_samples)
    write_frontier_csv(out / "progressive.csv", progressive)
    write_frontier_csv(out / "sparsity.csv", full)
    config = {"models": {n: p for n, p in args.model}, "granularities": args.granularities, "k": args.k, "rsa_samples": args.rsa_samples}
    write_frontier_json(out / "frontier.json", progressive + full, config)
    return {"config": config, "inputs": [p for _, p in args.model] + [args.data], "outputs": ["progressive.csv", "sparsity.csv", "frontier.json"]}


def _stats(args, ck: Checkpoint) -> FeatureStats:
    if args.data:
        shard = _load_data(args)
        return collect_stats(ck.params, batch_iter(shard, 4096), ck.config.k)
    if ck.stats is None:
        raise UsageError("the checkpoint carries no feature statistics; pass --data")
    return ck.stats


def cmd_permute(args, out: Path) -> dict:
    ck = load_checkpoint(args.model)
    stats = _stats(args, ck)
    perm = rank_features(stats, args.criterion)
    write_permutation(out / "permutation.txt", perm)
    permuted_stats = FeatureStats(stats.sum_sq[perm], stats.fire_count[perm], stats.n_samples)
    meta = {**ck.meta, "permuted_by": args.criterion.replace("-", "_")}
    save_checkpoint(out / "model.psae", Checkpoint(apply_permutation(ck.params, perm), ck.config, ck.schedule, permuted_stats, meta))
    return {
        "config": {"criterion": args.criterion},
        "inputs": [args.model] + ([args.data] if args.data else []),
        "outputs": ["permutation.txt", "model.psae"],
    }


def cmd_fit_powerlaw(args, out: Path) -> dict:
    ck = load_checkpoint(args.model)
    if args.stat == "eigvals":
        values = eigen_spectrum(ck.params.w_dec)
    else:
        stats = _stats(args, ck)
        values = stats.mean_sq_act if args.stat == "act2" else stats.fire_freq
    fit = fit_power_law(values, tuple(args.trim), criterion=args.stat)
    payload = fit.to_dict()
    if args.stat != "eigvals":
        # the rarely firing tail typically drops well below the central power law
        payload["tail_note"] = f"{fit.n_excluded_zeros} features never fired and were excluded"
    write_json(out / "powerlaw.json", payload)
    return {"config": {"stat": args.stat, "trim": list(args.trim)}, "inputs": [args.model], "outputs": ["powerlaw.json"], "summary": payload}


def cmd_fit_scaling(args, out: Path) -> dict:
    with open(args.observations, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"n", "k", "g", "loss"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"observations CSV lacks columns {sorted(missing)}")
        rows = [(float(r["n"]), float(r["k"]), float(r["g"]), float(r["loss"])) for r in reader]
    n, k, g, loss = np.array(rows, dtype=np.float64).T if rows else (np.array([]),) * 4
    fit = fit_scaling_law(n, k, g, loss, n_starts=args.n_starts, seed=args.seed, max_iter=args.max_iter)
    write_json(out / "scaling.json", fit.to_dict())
    return {
        "config": {"n_starts": args.n_starts, "seed": args.seed, "max_iter": args.max_iter},
        "inputs": [args.observations],
        "outputs": ["scaling.json"],
        "summary": {"r2": fit.r2, "converged": fit.converged, "degenerate": fit.degenerate},
    }


def cmd_splitting(args, out: Path) -> dict:
    ck = load_checkpoint(args.model)
    edges = args.block_edges if args.block_edges is not None else list(ck.schedule.sizes[:-1])
    res = feature_split_analysis(ck.params.w_dec, args.top_m, edges)
    with open(out / "splitting.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("feature", "mean_index", "neighbors"))
        for i in range(ck.params.n):
            mean = "" if res.excluded[i] else repr(float(res.mean_index[i]))
            writer.writerow((i, mean, " ".join(map(str, res.neighbors[i]))))
    blocks = {"block_edges": list(res.block_edges), "block_means": res.block_means.tolist(), "max_block_jump": res.max_block_jump()}
    write_json(out / "splitting_blocks.json", blocks)
    return {"config": {"top_m": args.top_m, "block_edges": edges}, "inputs": [args.model], "outputs": ["splitting.csv", "splitting_blocks.json"], "summary": blocks}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="progsae",
        description="Train and analyse TopK and Matryoshka sparse autoencoders as progressive coders.",
        epilog=CSV_SCHEMAS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, epilog=CSV_SCHEMAS, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("-o", "--out-dir", required=True, type=Path, help="directory for outputs and manifest.json")
        p.set_defaults(func=func)
        return p

    p = command("gen-data", cmd_gen_data, "generate synthetic superposition activations")
    p.add_argument("--n-samples", type=int, default=2_000_000)
    p.add_argument("--n-true", type=int, default=2048, help="ground-truth feature count")
    p.add_argument("--d", type=int, default=64, help="observed dimension")
    p.add_argument("--p-active", type=float, default=0.01)
    p.add_argument("--exponent", type=float, default=-0.6, help="feature importance exponent (< 0)")
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--signal-power", type=float, default=None, help="expected latent power per sample (default: d)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dictionary-seed", type=int, default=None, help="draw new samples of the features fixed by this seed")

    p = command("train", cmd_train, "train a TopK or Matryoshka SAE")
    _add_data_args(p)
    p.add_argument("--arch", choices=("topk", "matryoshka", "matryoshka-sampled"), default="matryoshka")
    p.add_argument("--sizes", type=_int_list, default=[256, 512, 1024], help="nested granularities; the largest is N")
    p.add_argument("--weights", type=lambda s: [float(v) for v in s.split(",")], default=None, help="per-granularity loss weights")
    p.add_argument("--k", type=int, default=32, help="active latents at full width")
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.99)
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--batch-size", type=int, default=1024)
    p.add_argument("--n-tokens", type=int, default=None, help="stop after this many samples")
    p.add_argument("--dead-window", type=int, default=100_000)
    p.add_argument("--aux-scale", type=float, default=1.0 / 32.0)
    p.add_argument("--sparsity-coeff", type=float, default=0.0)
    p.add_argument("--free-decoder-norm", action="store_true", help="do not renormalise decoder rows after each step")
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = command("frontier", cmd_frontier, "progressive and sparsity frontiers (FVU, RSA)")
    _add_data_args(p)
    p.add_argument("--model", type=_named_path, action="append", required=True, help="ID=PATH or PATH; repeatable")
    p.add_argument("--granularities", type=_int_list, default=None, help="default: each model's schedule sizes")
    p.add_argument("--k", type=int, default=0, help="full-width K (default: from the checkpoint)")
    p.add_argument("--rsa-samples", type=int, default=2000)
    p.add_argument("--n-samples", type=int, default=None, help="evaluate on the first N rows only")

    p = command("permute", cmd_permute, "rank features and write the permuted model")
    _add_data_args(p, required=False)
    p.add_argument("--model", required=True)
    p.add_argument("--criterion", choices=("mean-sq", "freq"), default="mean-sq")

    p = command("fit-powerlaw", cmd_fit_powerlaw, "power-law fit of a dictionary statistic against rank")
    _add_data_args(p, required=False)
    p.add_argument("--model", required=True)
    p.add_argument("--stat", choices=("eigvals", "act2", "freq"), default="eigvals")
    p.add_argument("--trim", type=_float_pair, default=(0.0, 1.0), help="rank quantile range 'lo,hi'")

    p = command("fit-scaling", cmd_fit_scaling, "fit the granularity scaling law to observations")
    p.add_argument("--observations", required=True, help="CSV with columns n,k,g,loss")
    p.add_argument("--n-starts", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-iter", type=int, default=50_000)

    p = command("splitting", cmd_splitting, "nearest-feature mean index of every decoder row")
    p.add_argument("--model", required=True)
    p.add_argument("--top-m", type=int, default=5)
    p.add_argument("--block-edges", type=_int_list, default=None, help="default: schedule sizes below N")
    return parser


def _manifest(args, argv, record: dict, seconds: float) -> dict:
    config = {k: (os.fspath(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    return {
        "command": args.command,
        "argv": list(argv),
        "args": config,
        "config": record.get("config", {}),
        "seed": getattr(args, "seed", None),
        "inputs": [os.fspath(p) for p in record.get("inputs", [])],
        "outputs": record.get("outputs", []),
        "summary": record.get("summary", {}),
        "tool_version": __version__,
        "kernel_backend": _kernels.backend(),
        "wall_clock_s": round(seconds, 3),
    }


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        record = args.func(args, args.out_dir)
        with open(args.out_dir / "manifest.json", "w") as fh:
            json.dump(_manifest(args, argv, record, time.perf_counter() - start), fh, indent=2, sort_keys=True, default=str)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"progsae {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ScalingFitError as exc:
        print(f"progsae {args.command}: fit failed: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, DivergenceError) as exc:
        print(f"progsae {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
