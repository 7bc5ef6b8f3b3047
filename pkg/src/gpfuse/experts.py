"""Pre-training of exact-GP experts for the stacking methods.

Random disjoint partitioning of a pool, per-expert type-II maximum likelihood
(quasi-Newton ascent of the log-marginal likelihood in log-parameter space,
with random restarts), and batched observation-space prediction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import seeds
from .errors import CholeskyFailure, OptimizationFailure, TooFewPoints
from .kernel import (
    ExactGpPosterior,
    KernelParams,
    Standardizer,
    gp_fit,
    gp_predict_batch,
    lml_value_and_grad,
)

ENSEMBLE_FORMAT = "gpfuse-ensemble"
ENSEMBLE_VERSION = 1

# restart initialization range and box bounds, in log-parameter space
LOG_INIT_LO = float(np.log(0.05))
LOG_INIT_HI = float(np.log(2.0))
LOG_BOUND = float(np.log(1e6))
DEFAULT_RESTARTS = 5
MAX_ITER = 200


@dataclass
class ExpertPredictions:
    """Observation-space predictive moments, one column per expert."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float)
        self.variances = np.asarray(self.variances, dtype=float)
        if self.means.shape != self.variances.shape:
            raise ValueError("means and variances must have the same shape")
        if not (np.all(np.isfinite(self.means)) and np.all(np.isfinite(self.variances))):
            raise ValueError("expert predictions must be finite")
        if np.any(self.variances <= 0):
            raise ValueError("expert predictive variances must be positive")

    @property
    def n_experts(self) -> int:
        return self.means.shape[1]


@dataclass
class ExpertEnsemble:
    """K fitted experts plus the index blocks they were trained on."""

    experts: list
    assignment: list

    @property
    def K(self) -> int:
        return len(self.experts)


def partition_data(indices, K: int, rng_seed) -> list:
    """Disjoint uniform-random blocks of size floor(n / K); remainder dropped."""
    indices = np.asarray(indices)
    n = indices.size
    if n < K:
        raise TooFewPoints(f"cannot split {n} points into {K} blocks")
    block = n // K
    perm = np.random.default_rng(rng_seed).permutation(n)
    return [np.sort(indices[perm[i * block : (i + 1) * block]]) for i in range(K)]


def _negative_lml(theta_log, X, y):
    params = KernelParams(
        amplitude=float(np.exp(theta_log[0])),
        lengthscale=float(np.exp(theta_log[1])),
        noise_variance=float(np.exp(theta_log[2])),
    )
    try:
        lml, grad = lml_value_and_grad(X, y, params)
    except CholeskyFailure:
        return 1e25, np.zeros(3)
    if not np.isfinite(lml):
        return 1e25, np.zeros(3)
    return -lml, -grad


def train_expert(X, y, rng_seed=0, restarts: int = DEFAULT_RESTARTS) -> ExactGpPosterior:
    """Fit hyperparameters by type-II ML with random restarts.

    Inputs are standardized per dimension before optimization; the returned
    posterior carries the standardizer, so queries are in original units.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.size < 2:
        raise TooFewPoints("need at least 2 points to train an expert")
    std = Standardizer.fit(X)
    Xs = std.transform(X)
    rng = np.random.default_rng(rng_seed)
    inits = rng.uniform(LOG_INIT_LO, LOG_INIT_HI, size=(restarts, 3))
    best = None
    for theta0 in inits:
        res = minimize(
            _negative_lml,
            theta0,
            args=(Xs, y),
            jac=True,
            method="L-BFGS-B",
            bounds=[(-LOG_BOUND, LOG_BOUND)] * 3,
            options={"maxiter": MAX_ITER, "gtol": 1e-5},
        )
        if not np.isfinite(res.fun) or res.fun >= 1e25:
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise OptimizationFailure("all restarts produced non-finite objectives")
    params = KernelParams(
        amplitude=float(np.exp(best.x[0])),
        lengthscale=float(np.exp(best.x[1])),
        noise_variance=float(np.exp(best.x[2])),
    )
    return gp_fit(X, y, params, standardizer=std)


def train_ensemble(X_pool, y_pool, K: int, rng_seed=0,
                   restarts: int = DEFAULT_RESTARTS) -> ExpertEnsemble:
    """Partition the pool into K blocks and train one expert per block."""
    X_pool = np.asarray(X_pool, dtype=float)
    y_pool = np.asarray(y_pool, dtype=float)
    blocks = partition_data(
        np.arange(y_pool.size), K, seeds.child(rng_seed, seeds.PARTITION))
    experts = [
        train_expert(
            X_pool[idx], y_pool[idx],
            rng_seed=seeds.child(rng_seed, seeds.EXPERT, k),
            restarts=restarts,
        )
        for k, idx in enumerate(blocks)
    ]
    return ExpertEnsemble(experts=experts, assignment=blocks)


def predict_all(ensemble: ExpertEnsemble, X_query) -> ExpertPredictions:
    """Observation-space predictive moments of every expert at every query row."""
    means = []
    variances = []
    for expert in ensemble.experts:
        m, v = gp_predict_batch(expert, X_query, observation_noise=True)
        means.append(m)
        variances.append(v)
    return ExpertPredictions(
        means=np.column_stack(means), variances=np.column_stack(variances))


def save_ensemble(ensemble: ExpertEnsemble, path, dataset_hash: str = "",
                  extra: dict | None = None) -> None:
    """Serialize hyperparameters and training-block indices to JSON."""
    doc = {
        "format": ENSEMBLE_FORMAT,
        "version": ENSEMBLE_VERSION,
        "dataset_hash": dataset_hash,
        "experts": [
            {
                "amplitude": e.params.amplitude,
                "lengthscale": e.params.lengthscale,
                "noise_variance": e.params.noise_variance,
                "standardizer": None
                if e.standardizer is None
                else {
                    "shift": e.standardizer.shift.tolist(),
                    "scale": e.standardizer.scale.tolist(),
                },
                "indices": idx.tolist(),
            }
            for e, idx in zip(ensemble.experts, ensemble.assignment)
        ],
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2))


def load_ensemble(path, X_pool, y_pool) -> ExpertEnsemble:
    """Rebuild an ensemble from JSON by refitting stored hyperparameters."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != ENSEMBLE_FORMAT:
        raise ValueError(f"{path} is not an ensemble file")
    if doc.get("version") != ENSEMBLE_VERSION:
        raise ValueError(f"unsupported ensemble version {doc.get('version')}")
    X_pool = np.asarray(X_pool, dtype=float)
    y_pool = np.asarray(y_pool, dtype=float)
    experts = []
    assignment = []
    for entry in doc["experts"]:
        idx = np.asarray(entry["indices"], dtype=int)
        params = KernelParams(
            amplitude=entry["amplitude"],
            lengthscale=entry["lengthscale"],
            noise_variance=entry["noise_variance"],
        )
        std = None
        if entry["standardizer"] is not None:
            std = Standardizer(
                shift=np.asarray(entry["standardizer"]["shift"], dtype=float),
                scale=np.asarray(entry["standardizer"]["scale"], dtype=float),
            )
        experts.append(gp_fit(X_pool[idx], y_pool[idx], params, standardizer=std))
        assignment.append(idx)
    return ExpertEnsemble(experts=experts, assignment=assignment)
