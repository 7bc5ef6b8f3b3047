"""NLPD scoring and the two experiment sweeps (experts vs. frequencies).

A sweep cell is one (method, K, M, split seed) fit-and-score run. Cells are
fully described by picklable payloads, so they can execute in a process pool;
results are merged by cell key in a fixed order, which makes tables identical
for any worker count.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import seeds
from .errors import CellTimeout, GpFuseError
from .experts import ExpertPredictions, predict_all, train_ensemble
from .fusion import logmeanexp
from .models import (
    FusionHyper,
    LatentKernel,
    bind,
    make_spec,
    map_estimate,
    per_draw_predictive,
)
from .sampler import INIT_SCALE, ChainConfig, nuts_sample, potential_scale_reduction
from .synthetic import GeneratorConfig, generate, halve_for_stacking, split

METHOD_CODES = {"bhs": 0, "pbhs": 1, "mogpe": 2, "pogpe": 3, "hetgp": 4}
STACKING_METHODS = ("bhs", "pbhs")

# convergence / predictive-quality gates
RHAT_FLAG = 1.1
MAX_DRAW_LOSS = 0.01
DEFAULT_CELL_TIMEOUT = 1200.0

# flags that disqualify a cell from aggregate statistics («k-constant» and the
# loss bookkeeping token are informational)
DISQUALIFYING = ("non-converged", "timeout", "draw-loss", "error")

CSV_COLUMNS = ["method", "K", "M", "seed", "mean_nlpd", "max_rhat",
               "divergences", "wall_time_s", "flags"]


def nlpd(per_point_logpdf) -> float:
    """Mean negative log predictive density; lower is better."""
    vals = np.asarray(per_point_logpdf, dtype=float)
    return float(-np.mean(vals))


_MAX_RHAT_PROBES = 25


def predictive_rhat(per_draw: np.ndarray, chains: int) -> float:
    """Max split potential scale reduction of per-draw predictive values.

    ``per_draw`` is (J, T) with J stacked chain-major; probe points with any
    non-finite entry (underflowed draws) are skipped.
    """
    J, T = per_draw.shape
    idx = np.unique(np.linspace(0, T - 1, min(T, _MAX_RHAT_PROBES)).astype(int))
    probes = per_draw[:, idx]
    finite = np.all(np.isfinite(probes), axis=0)
    if not np.any(finite):
        return float("inf")
    seqs = probes[:, finite].reshape(chains, J // chains, -1)
    return float(potential_scale_reduction(seqs).max())


@dataclass(frozen=True)
class RunResult:
    method: str
    K: int
    M: int
    split_seed: int
    mean_nlpd: float
    draw_loss_fraction: float
    wall_time_s: float
    max_rhat: float
    divergences: int
    flags: tuple = ()

    @property
    def disqualified(self) -> bool:
        return any(f.split(":")[0] in DISQUALIFYING for f in self.flags)

    def key(self):
        return (self.method, self.K, self.M, self.split_seed)


@dataclass
class SweepTable:
    results: list

    def __post_init__(self):
        self.results = sorted(self.results, key=RunResult.key)
        if len({r.key() for r in self.results}) != len(self.results):
            raise ValueError("duplicate sweep cells")

    def lookup(self, method, K, M, split_seed) -> RunResult:
        for r in self.results:
            if r.key() == (method, K, M, split_seed):
                return r
        raise KeyError((method, K, M, split_seed))

    def median_nlpd(self, method, variable, value) -> float:
        """Median over split seeds of non-disqualified cells."""
        vals = [
            r.mean_nlpd
            for r in self.results
            if r.method == method and getattr(r, variable) == value
            and not r.disqualified
        ]
        if not vals:
            return float("nan")
        return float(np.median(vals))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for r in self.results:
                flags = list(r.flags)
                if r.draw_loss_fraction > 0:
                    flags.append("loss=%.17g" % r.draw_loss_fraction)
                writer.writerow([
                    r.method, r.K, r.M, r.split_seed,
                    "%.17g" % r.mean_nlpd, "%.17g" % r.max_rhat,
                    r.divergences, "%.17g" % r.wall_time_s, ";".join(flags),
                ])

    @classmethod
    def read_csv(cls, path) -> "SweepTable":
        results = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != CSV_COLUMNS:
                raise ValueError(f"unexpected sweep CSV header {header}")
            for row in reader:
                tokens = [t for t in row[8].split(";") if t]
                loss = 0.0
                flags = []
                for t in tokens:
                    if t.startswith("loss="):
                        loss = float(t[5:])
                    else:
                        flags.append(t)
                results.append(RunResult(
                    method=row[0], K=int(row[1]), M=int(row[2]),
                    split_seed=int(row[3]), mean_nlpd=float(row[4]),
                    draw_loss_fraction=loss, wall_time_s=float(row[7]),
                    max_rhat=float(row[5]), divergences=int(row[6]),
                    flags=tuple(flags),
                ))
        return cls(results)

    def aggregate(self, variable: str) -> list:
        """Box statistics of mean NLPD per (method, variable value)."""
        keys = sorted({(r.method, getattr(r, variable)) for r in self.results})
        rows = []
        for method, value in keys:
            cells = [r for r in self.results
                     if r.method == method and getattr(r, variable) == value]
            ok = [r.mean_nlpd for r in cells if not r.disqualified]
            row = {"method": method, variable: value,
                   "n_cells": len(cells), "n_flagged": len(cells) - len(ok)}
            if ok:
                arr = np.asarray(ok)
                row.update(
                    median=float(np.median(arr)),
                    q25=float(np.percentile(arr, 25)),
                    q75=float(np.percentile(arr, 75)),
                    min=float(arr.min()),
                    max=float(arr.max()),
                )
            else:
                row.update(median=float("nan"), q25=float("nan"),
                           q75=float("nan"), min=float("nan"), max=float("nan"))
            rows.append(row)
        return rows

    def write_aggregate_csv(self, path, variable: str) -> None:
        rows = self.aggregate(variable)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "method", variable, "median", "q25", "q75", "min", "max",
                "n_cells", "n_flagged"])
            for row in rows:
                writer.writerow([
                    row["method"], row[variable],
                    "%.17g" % row["median"], "%.17g" % row["q25"],
                    "%.17g" % row["q75"], "%.17g" % row["min"],
                    "%.17g" % row["max"], row["n_cells"], row["n_flagged"]])


def _hyper_to_payload(hyper: FusionHyper):
    return tuple(
        (g, hyper.kernel(g).lengthscale, hyper.kernel(g).amplitude)
        for g in ("weight", "mean", "scale")
    )


def _hyper_from_payload(payload) -> FusionHyper:
    kw = {g: LatentKernel(ls, amp) for g, ls, amp in payload}
    return FusionHyper(**kw)


def run_cell(payload: dict) -> RunResult:
    """Fit one method on one prepared data case and score its test NLPD."""
    start = time.perf_counter()
    timeout = payload.get("timeout_s")
    deadline = time.monotonic() + timeout if timeout else None
    method = payload["method"]
    flags = []
    mean = loss = rhat = float("nan")
    divergences = -1
    try:
        preds_train = payload.get("preds_train")
        experts_train = (
            ExpertPredictions(*preds_train) if preds_train is not None else None)
        preds_test = payload.get("preds_test")
        experts_test = (
            ExpertPredictions(*preds_test) if preds_test is not None else None)
        spec = make_spec(
            method, payload["K"], payload["M"], payload["spec_seed"],
            hyper=_hyper_from_payload(payload["hyper"]), experts=experts_train)
        bound = bind(spec, payload["X_train"], payload["y_train"])
        cfg = ChainConfig(
            chains=payload["chains"], warmup_draws=payload["warmup_draws"],
            kept_draws=payload["kept_draws"],
            target_accept=payload["target_accept"],
            max_tree_depth=payload["max_tree_depth"],
            rng_seed=payload["cell_seed"])
        # warm start at the posterior mode so all chains explore one basin
        map_rng = np.random.default_rng(
            seeds.child(payload["cell_seed"], seeds.MAP, 0))
        eta0 = map_estimate(
            bound, INIT_SCALE * map_rng.standard_normal(spec.layout.dim))
        samples = nuts_sample(bound.to_log_density_model(), eta0, cfg,
                              deadline=deadline)
        divergences = int(samples.divergence_count.sum())
        per_draw, loss_count = per_draw_predictive(
            spec, samples.flat(), payload["X_test"], payload["y_test"],
            expert_predictions=experts_test)
        loss = loss_count / float(per_draw.size)
        mean = nlpd(logmeanexp(per_draw, axis=0))
        if cfg.chains >= 2:
            # convergence is diagnosed on per-draw predictive log-densities
            # at probe test points: label-invariant, and the quantity the
            # cell actually reports
            rhat = float(predictive_rhat(per_draw, cfg.chains))
            if not rhat < RHAT_FLAG:
                flags.append("non-converged")
        if loss > MAX_DRAW_LOSS:
            flags.append("draw-loss")
    except CellTimeout:
        flags.append("timeout")
    except GpFuseError as exc:
        flags.append(f"error:{type(exc).__name__}")
    wall = time.perf_counter() - start
    return RunResult(
        method=method, K=payload["report_K"], M=payload["M"],
        split_seed=payload["split_seed"], mean_nlpd=mean,
        draw_loss_fraction=loss if np.isfinite(loss) else 0.0,
        wall_time_s=wall, max_rhat=rhat, divergences=divergences,
        flags=tuple(flags))


@dataclass
class _SeedCase:
    split_seed: int
    train: object
    test: object
    expert_pool: object
    stack_pool: object
    preds_by_k: dict


def _prepare_cases(gen_config, split_seeds, root_seed, K_values,
                   regenerate=False, train_frac=0.8, expert_restarts=5):
    base = None if regenerate else generate(gen_config)
    cases = []
    for s in split_seeds:
        ds = base
        if regenerate:
            ds = generate(replace(
                gen_config, seed=seeds.derive_int(root_seed, seeds.DATASET, s)))
        train, test = split(ds, train_frac, s)
        expert_pool, stack_pool = halve_for_stacking(
            train, seeds.derive_int(root_seed, seeds.HALVE, s))
        preds_by_k = {}
        for K in sorted(set(K_values)):
            ensemble = train_ensemble(
                expert_pool.X, expert_pool.y, K,
                rng_seed=seeds.derive_int(root_seed, seeds.CELL, K, s),
                restarts=expert_restarts)
            preds_by_k[K] = (
                predict_all(ensemble, stack_pool.X),
                predict_all(ensemble, test.X),
            )
        cases.append(_SeedCase(s, train, test, expert_pool, stack_pool, preds_by_k))
    return cases


def _payload(method, K, M, case, chain: ChainConfig, hyper, root_seed,
             timeout_s, report_K=None):
    code = METHOD_CODES[method]
    if method in STACKING_METHODS:
        preds_s, preds_t = case.preds_by_k[K]
        X_train, y_train = case.stack_pool.X, case.stack_pool.y
        preds_train = (preds_s.means, preds_s.variances)
        preds_test = (preds_t.means, preds_t.variances)
    else:
        X_train, y_train = case.train.X, case.train.y
        preds_train = preds_test = None
    return {
        "method": method, "K": K, "M": M, "split_seed": case.split_seed,
        "report_K": K if report_K is None else report_K,
        "X_train": X_train, "y_train": y_train,
        "X_test": case.test.X, "y_test": case.test.y,
        "preds_train": preds_train, "preds_test": preds_test,
        "chains": chain.chains, "warmup_draws": chain.warmup_draws,
        "kept_draws": chain.kept_draws, "target_accept": chain.target_accept,
        "max_tree_depth": chain.max_tree_depth,
        "cell_seed": seeds.derive_int(root_seed, seeds.CELL, code, K, M,
                                      case.split_seed),
        "spec_seed": seeds.derive_int(root_seed, seeds.CELL, code, K, M,
                                      case.split_seed, 1),
        "hyper": _hyper_to_payload(hyper),
        "timeout_s": timeout_s,
    }


def _execute(payloads, workers: int):
    if workers <= 1:
        return [run_cell(p) for p in payloads]
    ctx = get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        return list(pool.map(run_cell, payloads))


def default_workers() -> int:
    env = os.environ.get("GPFUSE_WORKERS")
    if env:
        return max(1, int(env))
    return 1


def sweep_experts(gen_config: GeneratorConfig, K_list, M_fixed: int = 30,
                  split_seeds=(0, 1, 2, 3, 4), chain: ChainConfig = None,
                  hyper: FusionHyper = None, workers: int = 1, root_seed: int = 0,
                  regenerate: bool = False, train_frac: float = 0.8,
                  expert_restarts: int = 5,
                  cell_timeout: float = DEFAULT_CELL_TIMEOUT) -> SweepTable:
    """All methods across the expert-count grid; one shared-M sweep.

    The single-component baseline does not depend on K, so it runs once per
    seed and its row is replicated across the K grid with a ``k-constant``
    flag.
    """
    K_list = sorted(set(int(k) for k in K_list))
    if not K_list:
        raise ValueError("K_list must be non-empty")
    chain = chain or ChainConfig()
    hyper = hyper or FusionHyper()
    cases = _prepare_cases(gen_config, split_seeds, root_seed, K_list,
                           regenerate, train_frac, expert_restarts)
    payloads = []
    for case in cases:
        for K in K_list:
            for method in ("bhs", "pbhs", "mogpe", "pogpe"):
                payloads.append(_payload(method, K, M_fixed, case, chain,
                                         hyper, root_seed, cell_timeout))
        payloads.append(_payload("hetgp", 1, M_fixed, case, chain, hyper,
                                 root_seed, cell_timeout, report_K=K_list[0]))
    outputs = _execute(payloads, workers)
    results = []
    for res in outputs:
        if res.method == "hetgp":
            for K in K_list:
                results.append(replace(res, K=K, flags=res.flags + ("k-constant",)))
        else:
            results.append(res)
    return SweepTable(results)


def sweep_frequencies(gen_config: GeneratorConfig, M_list, K_fixed: int = 2,
                      split_seeds=(0, 1, 2, 3, 4), chain: ChainConfig = None,
                      hyper: FusionHyper = None, workers: int = 1,
                      root_seed: int = 0, regenerate: bool = False,
                      train_frac: float = 0.8, expert_restarts: int = 5,
                      cell_timeout: float = DEFAULT_CELL_TIMEOUT) -> SweepTable:
    """All methods across the spectral-frequency grid at a fixed expert count."""
    M_list = sorted(set(int(m) for m in M_list))
    if not M_list:
        raise ValueError("M_list must be non-empty")
    chain = chain or ChainConfig()
    hyper = hyper or FusionHyper()
    cases = _prepare_cases(gen_config, split_seeds, root_seed, [K_fixed],
                           regenerate, train_frac, expert_restarts)
    payloads = []
    for case in cases:
        for M in M_list:
            for method in ("bhs", "pbhs", "mogpe", "pogpe", "hetgp"):
                K = K_fixed if method != "hetgp" else 1
                payloads.append(_payload(method, K, M, case, chain, hyper,
                                         root_seed, cell_timeout,
                                         report_K=K_fixed))
    outputs = _execute(payloads, workers)
    return SweepTable(list(outputs))


def rank_methods(table: SweepTable) -> list:
    """Methods ordered by their overall median NLPD across non-flagged cells."""
    methods = sorted({r.method for r in table.results})
    scored = []
    for m in methods:
        vals = [r.mean_nlpd for r in table.results
                if r.method == m and not r.disqualified]
        scored.append((float(np.median(vals)) if vals else float("nan"), m))
    scored.sort(key=lambda t: (np.isnan(t[0]), t[0]))
    return [(m, v) for v, m in scored]
