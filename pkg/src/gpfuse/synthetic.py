"""Synthetic one-dimensional mixture-of-GP-experts data.

The generator draws unconstrained weight-score functions and mean functions
from exact GPs realized on a dense grid (Cholesky sampling, linear
interpolation between grid points), then per input picks a component with
the softmax weight probabilities and emits a Gaussian observation around
that component's mean.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import seeds
from .kernel import KernelParams, chol_with_jitter, gram_matrix

DATASET_FORMAT = "gpfuse-dataset"
DATASET_VERSION = 1

# floats are written with 17 significant digits, enough to round-trip a
# double exactly
_FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class GeneratorConfig:
    n: int = 1000
    k_true: int = 3
    lengthscale_weights: float = 0.5
    lengthscale_means: float = 0.2
    amplitude: float = 1.0
    noise_scale: float = 0.1
    gp_noise: bool = False
    noise_lengthscale: float = 0.5
    noise_amplitude: float = 0.3
    input_low: float = 0.0
    input_high: float = 1.0
    seed: int = 0
    grid_size: int = 2048

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.k_true < 1:
            raise ValueError("k_true must be >= 1")
        for name in ("lengthscale_weights", "lengthscale_means", "noise_lengthscale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not self.input_high > self.input_low:
            raise ValueError("input_high must exceed input_low")


@dataclass
class GroundTruth:
    """Generator internals on the realization grid, for checks and plots."""

    grid: np.ndarray
    weight_scores: np.ndarray  # (k_true, grid_size), pre-softmax
    means: np.ndarray  # (k_true, grid_size)
    log_scales: Optional[np.ndarray] = None  # (k_true, grid_size) when gp_noise

    def weights_at(self, x) -> np.ndarray:
        """Softmax component probabilities at the given inputs, (n, k_true)."""
        scores = np.stack(
            [np.interp(np.ravel(x), self.grid, s) for s in self.weight_scores], axis=1)
        scores -= scores.max(axis=1, keepdims=True)
        e = np.exp(scores)
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class Dataset:
    X: np.ndarray  # (n, d)
    y: np.ndarray  # (n,)
    provenance: dict = field(default_factory=dict)
    components: Optional[np.ndarray] = None
    truth: Optional[GroundTruth] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=float)
        if self.X.shape[0] != self.y.size:
            raise ValueError("X and y lengths disagree")

    @property
    def n(self) -> int:
        return self.y.size

    def subset(self, idx) -> "Dataset":
        comp = None if self.components is None else self.components[idx]
        return Dataset(self.X[idx], self.y[idx], dict(self.provenance), comp, self.truth)


def _gp_draws_on_grid(grid, lengthscale, amplitude, count, rng) -> np.ndarray:
    params = KernelParams(amplitude=amplitude, lengthscale=lengthscale, noise_variance=0.0)
    K = gram_matrix(grid[:, None], params)
    L, _ = chol_with_jitter(K, amplitude)
    z = rng.standard_normal((grid.size, count))
    return (L @ z).T


def generate(config: GeneratorConfig) -> Dataset:
    """Draw a dataset from the mixture generative process; seeded, reproducible."""
    rng_funcs = seeds.generator(config.seed, seeds.DATASET, 0)
    rng_inputs = seeds.generator(config.seed, seeds.DATASET, 1)
    rng_obs = seeds.generator(config.seed, seeds.DATASET, 2)

    grid = np.linspace(config.input_low, config.input_high, config.grid_size)
    weight_scores = _gp_draws_on_grid(
        grid, config.lengthscale_weights, config.amplitude, config.k_true, rng_funcs)
    means = _gp_draws_on_grid(
        grid, config.lengthscale_means, config.amplitude, config.k_true, rng_funcs)
    log_scales = None
    if config.gp_noise:
        log_scales = np.log(config.noise_scale) + _gp_draws_on_grid(
            grid, config.noise_lengthscale, config.noise_amplitude**2,
            config.k_true, rng_funcs)
    truth = GroundTruth(grid=grid, weight_scores=weight_scores, means=means,
                        log_scales=log_scales)

    x = rng_inputs.uniform(config.input_low, config.input_high, config.n)
    w = truth.weights_at(x)
    u = rng_obs.random(config.n)
    comp = (u[:, None] > np.cumsum(w, axis=1)).sum(axis=1)
    comp = np.minimum(comp, config.k_true - 1)

    mean_at = np.stack([np.interp(x, grid, m) for m in means], axis=1)
    mu = mean_at[np.arange(config.n), comp]
    if config.gp_noise:
        ls_at = np.stack([np.interp(x, grid, s) for s in log_scales], axis=1)
        sigma = np.exp(ls_at[np.arange(config.n), comp])
    else:
        sigma = np.full(config.n, config.noise_scale)
    y = mu + sigma * rng_obs.standard_normal(config.n)

    return Dataset(
        X=x[:, None], y=y, provenance=asdict(config), components=comp, truth=truth)


def split(ds: Dataset, train_frac: float, rng_seed) -> tuple:
    """Disjoint uniform random split with floor(n * train_frac) training rows."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    n_train = int(np.floor(ds.n * train_frac))
    perm = np.random.default_rng(rng_seed).permutation(ds.n)
    return ds.subset(perm[:n_train]), ds.subset(perm[n_train:])


def halve_for_stacking(train: Dataset, rng_seed) -> tuple:
    """Random halves (ceil, floor): an expert pool and a stacking pool."""
    if train.n < 2:
        raise ValueError("need at least 2 training points to halve")
    n_first = (train.n + 1) // 2
    perm = np.random.default_rng(rng_seed).permutation(train.n)
    return train.subset(perm[:n_first]), train.subset(perm[n_first:])


def save_dataset(ds: Dataset, csv_path, config_hash: str = "") -> None:
    """Write ``x,y[,component]`` rows plus a JSON sidecar with provenance."""
    csv_path = Path(csv_path)
    if ds.X.shape[1] != 1:
        raise ValueError("CSV serialization is defined for 1-d inputs")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if ds.components is None:
            writer.writerow(["x", "y"])
            for xi, yi in zip(ds.X[:, 0], ds.y):
                writer.writerow([_FLOAT_FMT % xi, _FLOAT_FMT % yi])
        else:
            writer.writerow(["x", "y", "component"])
            for xi, yi, ci in zip(ds.X[:, 0], ds.y, ds.components):
                writer.writerow([_FLOAT_FMT % xi, _FLOAT_FMT % yi, int(ci)])
    sidecar = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "n": ds.n,
        "config": ds.provenance,
        "csv_sha256": hashlib.sha256(csv_path.read_bytes()).hexdigest(),
        "config_hash": config_hash,
    }
    sidecar_path(csv_path).write_text(json.dumps(sidecar, indent=2))


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".json")


def load_dataset(csv_path) -> Dataset:
    """Read a dataset CSV and its sidecar back into memory."""
    csv_path = Path(csv_path)
    xs, ys, comps = [], [], []
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        has_comp = len(header) == 3
        for row in reader:
            xs.append(float(row[0]))
            ys.append(float(row[1]))
            if has_comp:
                comps.append(int(row[2]))
    provenance = {}
    side = sidecar_path(csv_path)
    if side.exists():
        provenance = json.loads(side.read_text()).get("config", {})
    return Dataset(
        X=np.asarray(xs)[:, None],
        y=np.asarray(ys),
        provenance=provenance,
        components=np.asarray(comps, dtype=int) if comps else None,
    )
