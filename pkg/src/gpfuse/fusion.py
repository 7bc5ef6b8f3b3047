"""Pooling rules that combine per-input Gaussian predictive densities.

Two families are implemented:

* linear pooling: a weighted mixture with weights on the simplex;
* log-linear pooling: a normalized weighted geometric mean. For Gaussian
  components this has a Gaussian closed form (the generalized product of
  experts): the fused precision is the weighted sum of component precisions
  and the fused mean is the precision-weighted mean.

Weights for log-linear pooling are only required to be positive, not to sum
to one; scaling all weights up sharpens the fused density and scaling them
down flattens it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import PrecisionUnderflow

LOG_2PI = float(np.log(2.0 * np.pi))

# Fused precisions below max(abs floor, rel floor * sharpest component
# precision) raise instead of emitting a near-infinite variance.
PRECISION_ABS_FLOOR = 1e-300
PRECISION_REL_FLOOR = 1e-12


def gaussian_logpdf(y, mean, variance):
    """Log-density of N(y | mean, variance); broadcasts over all arguments."""
    y = np.asarray(y, dtype=float)
    return -0.5 * (LOG_2PI + np.log(variance) + (y - mean) ** 2 / variance)


def logsumexp(a, axis=None):
    """Stable log(sum(exp(a))); handles -inf entries and all--inf slices."""
    a = np.asarray(a, dtype=float)
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - amax), axis=axis)) + np.squeeze(amax, axis=axis)
    return out if out.ndim else float(out)


def logmeanexp(a, axis=None):
    """Stable log of the arithmetic mean of exp(a)."""
    a = np.asarray(a, dtype=float)
    n = a.size if axis is None else a.shape[axis]
    return logsumexp(a, axis=axis) - np.log(n)


@dataclass(frozen=True)
class GaussianPrediction:
    """One predictive mean/variance pair, the unit every pooling rule consumes."""

    mean: float
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"variance must be strictly positive, got {self.variance}")

    def logpdf(self, y):
        return gaussian_logpdf(y, self.mean, self.variance)


@dataclass(frozen=True)
class SimplexWeights:
    """Nonnegative weights summing to one."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "w", w)
        if np.any(w < 0):
            raise ValueError("simplex weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError(f"simplex weights must sum to 1, got {w.sum()!r}")

    def __len__(self):
        return self.w.size


@dataclass(frozen=True)
class PositiveWeights:
    """Strictly positive weights with no sum constraint."""

    w: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        object.__setattr__(self, "w", w)
        if np.any(w <= 0):
            raise ValueError("weights must be strictly positive")

    def __len__(self):
        return self.w.size


def softmax(w_tilde) -> SimplexWeights:
    """Map unconstrained scores to the simplex, stable under large inputs."""
    v = np.asarray(w_tilde, dtype=float)
    v = v - v.max()
    e = np.exp(v)
    return SimplexWeights(e / e.sum())


def linear_pool_logpdf(preds, weights: SimplexWeights, y: float) -> float:
    """Log-density of the weighted Gaussian mixture at ``y``."""
    w = weights.w
    if len(preds) != w.size:
        raise ValueError("component count must equal weight count")
    logdens = np.array([p.logpdf(y) for p in preds])
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    return float(logsumexp(logw + logdens))


@dataclass(frozen=True)
class MixturePdf:
    """A finite Gaussian mixture; integrates to one by construction."""

    components: list = field(default_factory=list)
    weights: SimplexWeights = None

    def __post_init__(self):
        if len(self.components) != len(self.weights):
            raise ValueError("component count must equal weight count")

    def logpdf(self, y):
        return linear_pool_logpdf(self.components, self.weights, y)

    def mean(self):
        w = self.weights.w
        return float(sum(wk * c.mean for wk, c in zip(w, self.components)))

    def variance(self):
        w = self.weights.w
        m = self.mean()
        second = sum(wk * (c.variance + c.mean**2) for wk, c in zip(w, self.components))
        return float(second - m**2)


def _fused_moments(means, variances, w):
    precisions = 1.0 / variances
    fused_precision = float(np.dot(w, precisions))
    floor = max(PRECISION_ABS_FLOOR, PRECISION_REL_FLOOR * precisions.max())
    if not fused_precision > floor:
        raise PrecisionUnderflow(
            f"fused precision {fused_precision:.3e} below floor {floor:.3e}"
        )
    fused_variance = 1.0 / fused_precision
    fused_mean = fused_variance * float(np.dot(w, precisions * means))
    return fused_mean, fused_variance


def gpoe_fuse(preds, weights: PositiveWeights) -> GaussianPrediction:
    """Closed-form log-linear pool of Gaussian components.

    Fused precision is ``sum_k w_k / var_k``; the fused mean is the
    precision-weighted average of component means.
    """
    w = weights.w
    if len(preds) != w.size:
        raise ValueError("component count must equal weight count")
    means = np.array([p.mean for p in preds])
    variances = np.array([p.variance for p in preds])
    mu, var = _fused_moments(means, variances, w)
    return GaussianPrediction(mu, var)


def gpoe_logpdf(preds, weights: PositiveWeights, y: float) -> float:
    """Log-density at ``y`` of the normalized weighted product of the components."""
    fused = gpoe_fuse(preds, weights)
    return float(fused.logpdf(y))
