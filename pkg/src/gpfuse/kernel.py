"""Exact Gaussian-process regression with an RBF kernel.

Gram matrices, log-marginal likelihood (with its gradient in log-parameter
space, for type-II maximum likelihood), and posterior predictive moments.
All linear algebra goes through a jittered Cholesky factorization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.spatial.distance import cdist

from .errors import CholeskyFailure
from .fusion import GaussianPrediction

LOG_2PI = float(np.log(2.0 * np.pi))

# Jitter escalation: start at 1e-8 * amplitude, multiply by 10 up to
# 1e-2 * amplitude, then give up.
JITTER_START = 1e-8
JITTER_MAX = 1e-2

# Posterior variances are clipped from below at this value so rounding noise
# at interpolation points cannot produce a negative variance.
VARIANCE_FLOOR = 1e-300


@dataclass(frozen=True)
class KernelParams:
    """RBF hyperparameters: signal variance, lengthscale, noise variance."""

    amplitude: float
    lengthscale: float
    noise_variance: float

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ValueError(f"amplitude must be > 0, got {self.amplitude}")
        if not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be > 0, got {self.lengthscale}")
        if self.noise_variance < 0:
            raise ValueError(f"noise_variance must be >= 0, got {self.noise_variance}")


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x


def rbf_eval(x, x_prime, params: KernelParams) -> float:
    """amplitude * exp(-||x - x'||^2 / (2 lengthscale^2)) for a single pair."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x_prime = np.atleast_1d(np.asarray(x_prime, dtype=float))
    sq = float(np.sum((x - x_prime) ** 2))
    return params.amplitude * float(np.exp(-0.5 * sq / params.lengthscale**2))


def cross_gram(X, Z, params: KernelParams) -> np.ndarray:
    """Noise-free kernel matrix between the rows of X and the rows of Z."""
    X = _as_matrix(X)
    Z = _as_matrix(Z)
    sq = cdist(X, Z, "sqeuclidean")
    return params.amplitude * np.exp(-0.5 * sq / params.lengthscale**2)


def gram_matrix(X, params: KernelParams, include_noise: bool = False) -> np.ndarray:
    """Kernel matrix of X against itself, optionally with noise on the diagonal."""
    K = cross_gram(X, X, params)
    if include_noise:
        K[np.diag_indices_from(K)] += params.noise_variance
    return K


def chol_with_jitter(A: np.ndarray, scale: float):
    """Lower Cholesky factor of A, escalating diagonal jitter on failure.

    Returns ``(L, jitter)`` where ``jitter`` is the amount actually added to
    the diagonal (0.0 when none was needed). Raises ``CholeskyFailure`` once
    the jitter would exceed ``JITTER_MAX * scale``.
    """
    jitter = 0.0
    while True:
        try:
            M = A if jitter == 0.0 else A + jitter * np.eye(A.shape[0])
            return cholesky(M, lower=True), jitter
        except np.linalg.LinAlgError:
            pass
        except ValueError:
            pass
        jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10.0
        if jitter > JITTER_MAX * scale:
            raise CholeskyFailure(
                f"matrix not positive definite with jitter up to {JITTER_MAX * scale:.3e}"
            )


def log_marginal_likelihood(X, y, params: KernelParams) -> float:
    """-(1/2)(y' K^-1 y + log|K|) - (n/2) log(2 pi), K including noise."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n = y.size
    K = gram_matrix(X, params, include_noise=True)
    L, _ = chol_with_jitter(K, params.amplitude)
    alpha = cho_solve((L, True), y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * float(y @ alpha) - 0.5 * logdet - 0.5 * n * LOG_2PI


def lml_value_and_grad(X, y, params: KernelParams):
    """Log-marginal likelihood and its gradient in log-parameter space.

    The gradient is with respect to (log amplitude, log lengthscale,
    log noise_variance), the parameterization used by type-II ML.
    """
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    n = y.size
    sq = cdist(X, X, "sqeuclidean")
    R = np.exp(-0.5 * sq / params.lengthscale**2)
    K = params.amplitude * R
    K[np.diag_indices_from(K)] += params.noise_variance
    L, _ = chol_with_jitter(K, params.amplitude)
    alpha = cho_solve((L, True), y)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    lml = -0.5 * float(y @ alpha) - 0.5 * logdet - 0.5 * n * LOG_2PI

    Kinv = cho_solve((L, True), np.eye(n))
    A = np.outer(alpha, alpha) - Kinv
    dK_damp = params.amplitude * R
    dK_dell = params.amplitude * R * (sq / params.lengthscale**2)
    grad = np.array(
        [
            0.5 * float(np.sum(A * dK_damp)),
            0.5 * float(np.sum(A * dK_dell)),
            0.5 * params.noise_variance * float(np.trace(A)),
        ]
    )
    return lml, grad


@dataclass(frozen=True)
class Standardizer:
    """Affine map taking each input dimension to zero mean and unit variance."""

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = _as_matrix(X)
        shift = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(shift=shift, scale=scale)

    def transform(self, X) -> np.ndarray:
        return (_as_matrix(X) - self.shift) / self.scale


@dataclass(frozen=True)
class ExactGpPosterior:
    """Fitted GP: training inputs, Cholesky factor of K + noise, and alpha.

    ``train_inputs`` are stored in the (possibly standardized) space in which
    the kernel operates; ``standardizer`` maps query points into that space.
    """

    train_inputs: np.ndarray
    cholesky_factor: np.ndarray
    alpha: np.ndarray
    params: KernelParams
    standardizer: Optional[Standardizer] = None

    @property
    def lengthscale_raw(self) -> np.ndarray:
        """Per-dimension lengthscale in the original input units."""
        if self.standardizer is None:
            d = self.train_inputs.shape[1]
            return np.full(d, self.params.lengthscale)
        return self.params.lengthscale * self.standardizer.scale


def gp_fit(X, y, params: KernelParams, standardizer: Optional[Standardizer] = None) -> ExactGpPosterior:
    """Precompute the Cholesky factor and alpha = (K + noise I)^-1 y."""
    X = _as_matrix(X)
    y = np.asarray(y, dtype=float)
    if standardizer is not None:
        X = standardizer.transform(X)
    K = gram_matrix(X, params, include_noise=True)
    L, _ = chol_with_jitter(K, params.amplitude)
    alpha = cho_solve((L, True), y)
    return ExactGpPosterior(
        train_inputs=X,
        cholesky_factor=L,
        alpha=alpha,
        params=params,
        standardizer=standardizer,
    )


def gp_predict_batch(posterior: ExactGpPosterior, X_star, observation_noise: bool = False):
    """Predictive means and variances at each row of ``X_star``.

    Variances are the latent f* variances, plus the noise variance when
    ``observation_noise`` is set.
    """
    X_star = _as_matrix(X_star)
    if posterior.standardizer is not None:
        X_star = posterior.standardizer.transform(X_star)
    k_star = cross_gram(posterior.train_inputs, X_star, posterior.params)
    means = k_star.T @ posterior.alpha
    v = solve_triangular(posterior.cholesky_factor, k_star, lower=True)
    variances = posterior.params.amplitude - np.sum(v * v, axis=0)
    variances = np.maximum(variances, VARIANCE_FLOOR)
    if observation_noise:
        variances = variances + posterior.params.noise_variance
    return means, variances


def gp_predict(posterior: ExactGpPosterior, x_star, observation_noise: bool = False) -> GaussianPrediction:
    """Predictive mean/variance at a single query point."""
    means, variances = gp_predict_batch(
        posterior, np.atleast_2d(np.asarray(x_star, dtype=float)), observation_noise
    )
    return GaussianPrediction(float(means[0]), float(variances[0]))
