"""Command-line pipeline: data generation, expert training, fitting, sweeps.

Every run writes a resolved-config JSON capturing all defaults actually used,
plus a hash of that config that is embedded in each output artifact; the
``verify`` subcommand re-checks those hashes. One ``--seed`` reproduces an
entire run bit for bit, including sweeps, for any ``--workers`` count.

Exit codes: 0 success, 1 validation error, 2 runtime error (including partial
sweep failure), 3 non-convergence under ``--strict``.
"""

from __future__ import annotations

import os

# Cap BLAS threading before numpy loads in this process and in spawned
# sweep workers; the dense problems here are too small to benefit.
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import seeds
from .errors import GpFuseError
from .evaluate import (
    DEFAULT_CELL_TIMEOUT,
    METHOD_CODES,
    RHAT_FLAG,
    SweepTable,
    default_workers,
    nlpd,
    rank_methods,
    run_cell,
    sweep_experts,
    sweep_frequencies,
)
from .experts import load_ensemble, predict_all, save_ensemble, train_ensemble
from .models import FusionHyper, make_spec, predictive_logpdf_batch
from .sampler import ChainConfig
from .synthetic import (
    GeneratorConfig,
    generate,
    halve_for_stacking,
    load_dataset,
    save_dataset,
    sidecar_path,
    split,
)

STACKING = ("bhs", "pbhs")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def canonical_hash(obj) -> str:
    return hashlib.sha256(
        json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_run_config(out_dir: Path, resolved: dict) -> str:
    h = canonical_hash(resolved)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(
        json.dumps({"resolved": resolved, "config_hash": h}, indent=2))
    return h


def _gen_config_from_args(args) -> GeneratorConfig:
    return GeneratorConfig(
        n=args.n, k_true=args.k_true, noise_scale=args.noise_scale,
        gp_noise=args.gp_noise, seed=args.seed)


def cmd_generate(args) -> int:
    config = _gen_config_from_args(args)
    resolved = {"command": "generate", **config.__dict__.copy()}
    out_dir = Path(args.out)
    h = _write_run_config(out_dir, resolved)
    ds = generate(config)
    csv_path = out_dir / "dataset.csv"
    save_dataset(ds, csv_path, config_hash=h)
    print(f"wrote {csv_path} (n={ds.n}, x range "
          f"[{ds.X.min():.4g}, {ds.X.max():.4g}], y range "
          f"[{ds.y.min():.4g}, {ds.y.max():.4g}], seed={config.seed})")
    return 0


def cmd_train_experts(args) -> int:
    ds = load_dataset(args.data)
    train, _ = split(ds, args.train_frac, args.split_seed)
    expert_pool, _ = halve_for_stacking(
        train, seeds.derive_int(args.seed, seeds.HALVE, args.split_seed))
    ensemble = train_ensemble(
        expert_pool.X, expert_pool.y, args.k,
        rng_seed=seeds.derive_int(args.seed, seeds.CELL, args.k, args.split_seed),
        restarts=args.restarts)
    resolved = {
        "command": "train-experts", "data": str(args.data), "k": args.k,
        "seed": args.seed, "split_seed": args.split_seed,
        "train_frac": args.train_frac, "restarts": args.restarts,
    }
    h = canonical_hash(resolved)
    save_ensemble(
        ensemble, args.out, dataset_hash=file_sha256(args.data),
        extra={"split_seed": args.split_seed, "train_frac": args.train_frac,
               "root_seed": args.seed, "k": args.k, "config_hash": h,
               "resolved": resolved})
    scales = [f"{e.params.lengthscale:.3g}" for e in ensemble.experts]
    print(f"wrote {args.out} ({args.k} experts, lengthscales {scales})")
    return 0


def _chain_config(args, cell_seed) -> ChainConfig:
    return ChainConfig(
        chains=args.chains, warmup_draws=args.warmup, kept_draws=args.draws,
        target_accept=args.target_accept, max_tree_depth=args.max_depth,
        rng_seed=cell_seed)


def _param_names(layout):
    names = []
    for g in ("mean", "scale", "weight"):
        if g not in layout.counts:
            continue
        for k in range(layout.counts[g]):
            names.extend(
                f"{g}[{k}].{j}" for j in range(layout.num_features))
    return names


def write_samples_csv(path, samples, layout) -> None:
    names = _param_names(layout)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain", "draw"] + names)
        C, D, _ = samples.draws.shape
        for c in range(C):
            for d in range(D):
                writer.writerow(
                    [c, d] + ["%.17g" % v for v in samples.draws[c, d]])


def read_samples_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [(int(r[0]), [float(v) for v in r[2:]]) for r in reader]
    chains = max(r[0] for r in rows) + 1
    per = len(rows) // chains
    dim = len(rows[0][1])
    draws = np.empty((chains, per, dim))
    counts = [0] * chains
    for c, vec in rows:
        draws[c, counts[c]] = vec
        counts[c] += 1
    return draws


def cmd_fit(args) -> int:
    if args.method not in METHOD_CODES:
        raise ValueError(f"unknown method {args.method!r}")
    if args.method == "bhs" and args.k < 2:
        raise ValueError("bhs needs --k >= 2 (a single expert has no free weights)")
    if args.method in STACKING and not args.experts:
        raise ValueError(
            f"--experts is required for {args.method}: pass the ensemble JSON "
            "written by train-experts")

    ds = load_dataset(args.data)
    train, test = split(ds, args.train_frac, args.split_seed)

    preds_train = preds_test = None
    experts_path = None
    if args.method in STACKING:
        experts_path = Path(args.experts)
        doc = json.loads(experts_path.read_text())
        if doc.get("dataset_hash") and doc["dataset_hash"] != file_sha256(args.data):
            raise GpFuseError(
                "expert ensemble was trained on a different dataset file")
        if doc.get("k") != args.k:
            raise ValueError(
                f"ensemble holds {doc.get('k')} experts but --k is {args.k}")
        expert_pool, stack_pool = halve_for_stacking(
            train, seeds.derive_int(
                doc["root_seed"], seeds.HALVE, doc["split_seed"]))
        ensemble = load_ensemble(experts_path, expert_pool.X, expert_pool.y)
        preds_train = predict_all(ensemble, stack_pool.X)
        preds_test = predict_all(ensemble, test.X)
        X_fit, y_fit = stack_pool.X, stack_pool.y
    else:
        X_fit, y_fit = train.X, train.y

    from .evaluate import predictive_rhat
    from .fusion import logmeanexp
    from .models import bind, map_estimate, per_draw_predictive
    from .sampler import INIT_SCALE, nuts_sample

    code = METHOD_CODES[args.method]
    K = args.k if args.method != "hetgp" else 1
    cell_seed = seeds.derive_int(args.seed, seeds.CELL, code, K, args.m,
                                 args.split_seed)
    spec_seed = seeds.derive_int(args.seed, seeds.CELL, code, K, args.m,
                                 args.split_seed, 1)
    spec = make_spec(args.method, K, args.m, spec_seed, experts=preds_train)
    cfg = _chain_config(args, cell_seed)

    resolved = {
        "command": "fit", "method": args.method, "k": args.k, "m": args.m,
        "seed": args.seed, "split_seed": args.split_seed,
        "train_frac": args.train_frac, "data": str(args.data),
        "experts": str(args.experts) if args.experts else None,
        "chains": cfg.chains, "warmup": cfg.warmup_draws,
        "draws": cfg.kept_draws, "target_accept": cfg.target_accept,
        "max_depth": cfg.max_tree_depth,
    }
    out_dir = Path(args.out)
    h = _write_run_config(out_dir, resolved)

    t0 = time.perf_counter()
    bound = bind(spec, X_fit, y_fit)
    map_rng = np.random.default_rng(seeds.child(cell_seed, seeds.MAP, 0))
    eta0 = map_estimate(bound, INIT_SCALE * map_rng.standard_normal(spec.layout.dim))
    samples = nuts_sample(bound.to_log_density_model(), eta0, cfg)
    per_draw, loss_count = per_draw_predictive(
        spec, samples.flat(), test.X, test.y, expert_predictions=preds_test)
    logpdf = logmeanexp(per_draw, axis=0)
    loss = loss_count / float(per_draw.size)
    rhat = (float(predictive_rhat(per_draw, cfg.chains))
            if cfg.chains >= 2 else float("nan"))
    mean_nlpd = nlpd(logpdf)
    wall = time.perf_counter() - t0

    samples_csv = out_dir / "samples.csv"
    write_samples_csv(samples_csv, samples, spec.layout)
    with open(out_dir / "predictive.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "logpdf"])
        for x, y, v in zip(test.X[:, 0], test.y, logpdf):
            writer.writerow(["%.17g" % x, "%.17g" % y, "%.17g" % v])
    sidecar = {
        "format": "gpfuse-fit", "version": 1, "config_hash": h,
        "resolved": resolved,
        "spec": {"method": args.method, "K": K, "M": args.m,
                 "spec_seed": spec_seed, "weight_prior_mean": spec.weight_prior_mean},
        "layout": {"dim": spec.layout.dim,
                   "blocks": spec.layout.block_names()},
        "seeds": {"cell_seed": cell_seed, "spec_seed": spec_seed},
        "dataset_sha256": file_sha256(args.data),
        "samples_sha256": file_sha256(samples_csv),
        "diagnostics": {
            "max_rhat": rhat,
            "divergences": [int(v) for v in samples.divergence_count],
            "step_sizes": [float(v) for v in samples.step_sizes],
            "mean_accept": [float(v) for v in samples.mean_accept],
        },
        "mean_nlpd": mean_nlpd,
        "draw_loss_fraction": loss,
        "wall_time_s": wall,
    }
    (out_dir / "samples.json").write_text(json.dumps(sidecar, indent=2))
    print(f"method={args.method} K={K} M={args.m} mean_nlpd={mean_nlpd:.17g} "
          f"max_rhat={rhat:.4g} divergences={int(samples.divergence_count.sum())} "
          f"wall={wall:.1f}s")
    if args.strict and np.isfinite(rhat) and rhat >= RHAT_FLAG:
        print(f"non-convergence: max split-rhat {rhat:.4g} >= {RHAT_FLAG}",
              file=sys.stderr)
        return 3
    return 0


def cmd_evaluate(args) -> int:
    fit_dir = Path(args.fit)
    sidecar = json.loads((fit_dir / "samples.json").read_text())
    resolved = sidecar["resolved"]
    if file_sha256(args.data) != sidecar["dataset_sha256"]:
        raise GpFuseError("dataset file does not match the fit artifact")
    ds = load_dataset(args.data)
    train, test = split(ds, resolved["train_frac"], resolved["split_seed"])
    preds_test = None
    spec_experts = None
    if resolved["method"] in STACKING:
        doc = json.loads(Path(resolved["experts"]).read_text())
        expert_pool, stack_pool = halve_for_stacking(
            train, seeds.derive_int(
                doc["root_seed"], seeds.HALVE, doc["split_seed"]))
        ensemble = load_ensemble(resolved["experts"], expert_pool.X, expert_pool.y)
        spec_experts = predict_all(ensemble, stack_pool.X)
        preds_test = predict_all(ensemble, test.X)
    spec = make_spec(resolved["method"], sidecar["spec"]["K"], resolved["m"],
                     sidecar["spec"]["spec_seed"], experts=spec_experts)
    draws = read_samples_csv(fit_dir / "samples.csv")
    logpdf, loss = predictive_logpdf_batch(
        spec, draws.reshape(-1, draws.shape[2]), test.X, test.y,
        expert_predictions=preds_test)
    mean_nlpd = nlpd(logpdf)
    stored = sidecar["mean_nlpd"]
    print(f"recomputed mean_nlpd={mean_nlpd:.17g} stored={stored:.17g}")
    # samples round-trip through 17 significant digits, so scores agree
    # to full precision
    if abs(mean_nlpd - stored) > 1e-9 * max(1.0, abs(stored)):
        print("mismatch between recomputed and stored NLPD", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args) -> int:
    chain = ChainConfig(
        chains=args.chains, warmup_draws=args.warmup, kept_draws=args.draws,
        target_accept=args.target_accept, max_tree_depth=args.max_depth,
        rng_seed=0)
    gen_config = _gen_config_from_args(args)
    split_seeds = list(range(args.seeds))
    workers = args.workers if args.workers else default_workers()
    resolved = {
        "command": f"sweep-{args.variable}", "seed": args.seed,
        "generator": gen_config.__dict__.copy(), "split_seeds": split_seeds,
        "chains": chain.chains, "warmup": chain.warmup_draws,
        "draws": chain.kept_draws, "timeout": args.timeout,
        "k": args.k, "m": args.m, "workers": workers,
    }
    out_dir = Path(args.out)
    h = _write_run_config(out_dir, resolved)

    common = dict(
        gen_config=gen_config, split_seeds=split_seeds, chain=chain,
        workers=workers, root_seed=args.seed, regenerate=args.regenerate,
        cell_timeout=args.timeout)
    if args.variable == "experts":
        k_list = [int(v) for v in args.k.split(",")]
        table = sweep_experts(K_list=k_list, M_fixed=args.m_fixed, **common)
        variable = "K"
    else:
        m_list = [int(v) for v in args.m.split(",")]
        table = sweep_frequencies(M_list=m_list, K_fixed=args.k_fixed, **common)
        variable = "M"

    table.write_csv(out_dir / "cells.csv")
    table.write_aggregate_csv(out_dir / "box_stats.csv", variable)
    lines = [f"config_hash: {h}", "methods ranked by overall median NLPD:"]
    for method, med in rank_methods(table):
        lines.append(f"  {method:6s} {med:.4f}")
    flagged = [r for r in table.results if r.disqualified]
    lines.append(f"cells: {len(table.results)}, flagged: {len(flagged)}")
    summary = "\n".join(lines)
    (out_dir / "summary.txt").write_text(summary + "\n")
    print(summary)

    hard = [r for r in flagged
            if any(f.startswith(("error", "timeout")) for f in r.flags)]
    if hard:
        print(f"{len(hard)} cells failed; table written", file=sys.stderr)
        return 2
    if args.strict and flagged:
        print(f"{len(flagged)} cells non-converged; table written", file=sys.stderr)
        return 3
    return 0


def cmd_verify(args) -> int:
    failures = 0
    for raw in args.paths:
        path = Path(raw)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"{path}: unreadable ({exc})")
            failures += 1
            continue
        ok = True
        if "resolved" in doc and "config_hash" in doc:
            if canonical_hash(doc["resolved"]) != doc["config_hash"]:
                ok = False
                print(f"{path}: config hash mismatch")
        if doc.get("format") == "gpfuse-dataset":
            csv_file = path.with_suffix(".csv")
            if not csv_file.exists() or file_sha256(csv_file) != doc["csv_sha256"]:
                ok = False
                print(f"{path}: dataset CSV hash mismatch")
        if doc.get("format") == "gpfuse-fit":
            samples_file = path.parent / "samples.csv"
            if (not samples_file.exists()
                    or file_sha256(samples_file) != doc["samples_sha256"]):
                ok = False
                print(f"{path}: samples CSV hash mismatch")
        if ok:
            print(f"{path}: ok")
        else:
            failures += 1
    return 2 if failures else 0


def _add_chain_flags(p):
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--draws", type=int, default=500,
                   help="kept draws per chain")
    p.add_argument("--warmup", type=int, default=500)
    p.add_argument("--target-accept", type=float, default=0.8)
    p.add_argument("--max-depth", type=int, default=10)


def _add_generator_flags(p):
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--k-true", type=int, default=3)
    p.add_argument("--noise-scale", type=float, default=0.1)
    p.add_argument("--gp-noise", action="store_true",
                   help="draw per-component log noise scales from a GP")


def build_parser() -> _Parser:
    parser = _Parser(prog="gpfuse", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", type=str, default=None,
                        help="JSON file of flag defaults; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_generator_flags(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=True, help="output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-experts", help="pre-train a GP expert ensemble")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--out", type=str, required=True, help="ensemble JSON path")
    p.set_defaults(func=cmd_train_experts)

    p = sub.add_parser("fit", help="run one method end to end")
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--method", type=str, required=True,
                   choices=sorted(METHOD_CODES))
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--m", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--experts", type=str, default=None)
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out", type=str, required=True, help="output directory")
    _add_chain_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("evaluate", help="recompute NLPD from a fit directory")
    p.add_argument("--fit", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run an experiment grid")
    p.add_argument("variable", choices=("experts", "frequencies"))
    _add_generator_flags(p)
    p.add_argument("--seed", type=int, default=0,
                   help="root seed for everything in the sweep")
    p.add_argument("--k", type=str, default="2,3,4,5",
                   help="comma list of expert counts (experts sweep)")
    p.add_argument("--m", type=str, default="10,20,30,40,50",
                   help="comma list of frequency counts (frequencies sweep)")
    p.add_argument("--m-fixed", type=int, default=30)
    p.add_argument("--k-fixed", type=int, default=2)
    p.add_argument("--seeds", type=int, default=5,
                   help="number of split seeds (0..N-1)")
    p.add_argument("--workers", type=int, default=None,
                   help="process count; default GPFUSE_WORKERS or 1")
    p.add_argument("--timeout", type=float, default=DEFAULT_CELL_TIMEOUT,
                   help="per-cell wall-clock budget in seconds")
    p.add_argument("--regenerate", action="store_true",
                   help="draw a fresh dataset per split seed")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--out", type=str, required=True, help="output directory")
    _add_chain_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="re-check config and content hashes")
    p.add_argument("paths", nargs="+")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if "--config" in argv:
        idx = argv.index("--config")
        try:
            overrides = json.loads(Path(argv[idx + 1]).read_text())
        except (IndexError, OSError, json.JSONDecodeError) as exc:
            print(f"error: cannot read --config: {exc}", file=sys.stderr)
            return 1
        parser.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except GpFuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
