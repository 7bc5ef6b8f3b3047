"""Random Fourier feature approximation of the RBF kernel.

Frequencies are drawn from the kernel's normalized spectral density (for an
RBF kernel with lengthscale ``l``, a zero-mean Gaussian with covariance
``l^-2 I``). Each frequency contributes a paired cosine/sine feature, so a
basis of M frequencies induces a 2M-dimensional linear-Gaussian model whose
prior covariance of weights is ``(amplitude / M) I``: the implied function
prior then matches the exact GP prior in expectation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RffBasis:
    """Sampled spectral frequencies plus the kernel constants they encode."""

    frequencies: np.ndarray  # (M, d), rows are frequency vectors
    lengthscale: float
    amplitude: float
    prior_weight_variance: float

    def __post_init__(self):
        freq = np.atleast_2d(np.asarray(self.frequencies, dtype=float))
        object.__setattr__(self, "frequencies", freq)
        if self.num_frequencies < 1:
            raise ValueError("at least one frequency is required")

    @property
    def num_frequencies(self) -> int:
        return self.frequencies.shape[0]

    @property
    def num_features(self) -> int:
        return 2 * self.frequencies.shape[0]

    @property
    def input_dim(self) -> int:
        return self.frequencies.shape[1]


@dataclass(frozen=True)
class RffWeights:
    """Linear coefficients of one feature-space function (length 2M)."""

    psi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "psi", np.asarray(self.psi, dtype=float))
        if self.psi.ndim != 1 or self.psi.size % 2 != 0:
            raise ValueError("weights must be a flat vector of even length")


def sample_frequencies(M: int, lengthscale: float, dim: int, rng_seed, amplitude: float = 1.0) -> RffBasis:
    """Draw M frequency vectors i.i.d. from N(0, lengthscale^-2 I)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    if not lengthscale > 0:
        raise ValueError("lengthscale must be > 0")
    rng = np.random.default_rng(rng_seed)
    freqs = rng.standard_normal((M, dim)) / lengthscale
    return RffBasis(
        frequencies=freqs,
        lengthscale=float(lengthscale),
        amplitude=float(amplitude),
        prior_weight_variance=float(amplitude) / M,
    )


def feature_matrix(X, basis: RffBasis) -> np.ndarray:
    """Feature vectors for each row of X: [cos(w_1.x), sin(w_1.x), ...].

    Shape (n, 2M); the squared norm of every row is M up to rounding.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    proj = X @ basis.frequencies.T  # (n, M)
    out = np.empty((X.shape[0], 2 * proj.shape[1]))
    out[:, 0::2] = np.cos(proj)
    out[:, 1::2] = np.sin(proj)
    return out


def feature_map(x, basis: RffBasis) -> np.ndarray:
    """Feature vector of a single input point, shape (2M,)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return feature_matrix(x[None, :], basis)[0]


def rff_predict(x, basis: RffBasis, weights: RffWeights) -> float:
    """Function value phi(x) . psi of the feature-space linear model."""
    return float(feature_map(x, basis) @ weights.psi)


def approx_kernel(x, x_prime, basis: RffBasis) -> float:
    """Monte Carlo kernel estimate (amplitude / M) * phi(x) . phi(x')."""
    return basis.prior_weight_variance * float(
        feature_map(x, basis) @ feature_map(x_prime, basis)
    )
