"""Fusion regression models as differentiable log-posteriors.

Every model represents its unknowns as feature-space coefficients of random
Fourier bases: each latent function (a per-expert mean, log-scale, or weight
score) is ``phi_k(x) . psi_k`` with an independent basis per function and an
isotropic Gaussian prior on the coefficients. The flat parameter vector
stacks one coefficient block per latent function, group by group; gradients
are computed analytically.

Methods
-------
bhs    linear pooling of fixed expert predictives; softmax weights from K-1
       score functions (the last score pinned to zero)
pbhs   log-linear pooling of fixed expert predictives; K free positive
       weights, log-weights offset by -log K
mogpe  linear pooling with jointly learned heteroscedastic components
pogpe  log-linear pooling with jointly learned components
hetgp  single jointly learned heteroscedastic component (no pooling)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import seeds
from .experts import ExpertPredictions
from .fusion import LOG_2PI, PRECISION_ABS_FLOOR, PRECISION_REL_FLOOR, logmeanexp
from .rff import RffBasis, feature_matrix, sample_frequencies
from .sampler import LogDensityModel

METHODS = ("bhs", "pbhs", "mogpe", "pogpe", "hetgp")

# log-scale outputs are clamped here before exponentiation; the gradient is
# zero in the clamped region
LOG_SCALE_CLAMP = 15.0

# guard for exp() of log-weights during early exploration
LOG_WEIGHT_MAX = 600.0

_GROUP_ORDER = ("mean", "scale", "weight")


@dataclass(frozen=True)
class LatentKernel:
    """Fixed RBF hyperparameters of one family of latent functions."""

    lengthscale: float
    amplitude: float = 1.0


@dataclass(frozen=True)
class FusionHyper:
    """Kernels for the weight, mean, and log-scale function families."""

    weight: LatentKernel = LatentKernel(0.5, 1.0)
    mean: LatentKernel = LatentKernel(0.2, 1.0)
    scale: LatentKernel = LatentKernel(0.5, 1.0)

    def kernel(self, group: str) -> LatentKernel:
        return getattr(self, group)


def _group_counts(method: str, K: int) -> dict:
    if method == "bhs":
        return {"weight": K - 1}
    if method == "pbhs":
        return {"weight": K}
    if method == "mogpe":
        return {"mean": K, "scale": K, "weight": K - 1}
    if method == "pogpe":
        return {"mean": K, "scale": K, "weight": K}
    if method == "hetgp":
        return {"mean": 1, "scale": 1}
    raise ValueError(f"unknown method {method!r}")


@dataclass(frozen=True)
class ParameterLayout:
    """Named contiguous blocks of the flat parameter vector."""

    dim: int
    num_features: int
    counts: dict
    group_slices: dict

    def slice_of(self, group: str, k: int) -> slice:
        base = self.group_slices[group].start
        F = self.num_features
        return slice(base + k * F, base + (k + 1) * F)

    def block_names(self):
        return [
            f"{g}[{k}]"
            for g in _GROUP_ORDER
            if g in self.counts
            for k in range(self.counts[g])
        ]


def build_layout(method: str, K: int, M: int) -> ParameterLayout:
    counts = {g: c for g, c in _group_counts(method, K).items() if c > 0}
    ordered = {g: counts[g] for g in _GROUP_ORDER if g in counts}
    F = 2 * M
    offset = 0
    group_slices = {}
    for g, c in ordered.items():
        group_slices[g] = slice(offset, offset + c * F)
        offset += c * F
    return ParameterLayout(dim=offset, num_features=F, counts=ordered,
                           group_slices=group_slices)


@dataclass
class FusionModelSpec:
    """Static configuration of one fusion model: bases, priors, experts."""

    method: str
    K: int
    M: int
    bases: dict
    weight_prior_mean: float
    hyper: FusionHyper
    seed: int
    input_dim: int = 1
    experts: Optional[ExpertPredictions] = None
    layout: ParameterLayout = field(init=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        self.layout = build_layout(self.method, self.K, self.M)

    @property
    def requires_experts(self) -> bool:
        return self.method in ("bhs", "pbhs")


def make_spec(method: str, K: int, M: int, rng_seed: int,
              hyper: Optional[FusionHyper] = None, input_dim: int = 1,
              experts: Optional[ExpertPredictions] = None) -> FusionModelSpec:
    """Sample all latent-function bases and assemble a model spec.

    Bases are seeded per (group, index), so two specs built from the same
    root seed share the basis of any latent function they have in common.
    """
    hyper = hyper or FusionHyper()
    if method == "hetgp":
        K = 1
    counts = {g: c for g, c in _group_counts(method, K).items() if c > 0}
    bases = {}
    for g, count in counts.items():
        kern = hyper.kernel(g)
        bases[g] = [
            sample_frequencies(
                M, kern.lengthscale, input_dim,
                seeds.child(rng_seed, seeds.BASIS, seeds.GROUP_CODES[g], k),
                amplitude=kern.amplitude,
            )
            for k in range(count)
        ]
    prior_mean = -float(np.log(K)) if method in ("pbhs", "pogpe") else 0.0
    return FusionModelSpec(
        method=method, K=K, M=M, bases=bases, weight_prior_mean=prior_mean,
        hyper=hyper, seed=int(rng_seed), input_dim=input_dim, experts=experts,
    )


def sample_prior(spec: FusionModelSpec, rng) -> np.ndarray:
    """One coefficient vector drawn from the prior."""
    rng = np.random.default_rng(rng)
    eta = np.empty(spec.layout.dim)
    for g in spec.layout.counts:
        sl = spec.layout.group_slices[g]
        sd = np.sqrt(spec.bases[g][0].prior_weight_variance)
        eta[sl] = sd * rng.standard_normal(sl.stop - sl.start)
    return eta


def _softmax_cols(A):
    """Column-wise (logsumexp, softmax) of a (K, n) array of finite scores."""
    m = A.max(axis=0)
    E = np.exp(A - m)
    s = E.sum(axis=0)
    return m + np.log(s), E / s


class BoundModel:
    """A fusion model bound to a dataset, exposing logpost and its gradient.

    All latent functions live in one stacked feature tensor of shape
    (G, n, 2M), G being the total number of latent functions; likelihood
    terms are computed in (K, n) orientation so the backward pass is a
    single batched matrix product.
    """

    def __init__(self, spec: FusionModelSpec, X, y,
                 expert_predictions: Optional[ExpertPredictions] = None):
        self.spec = spec
        self.layout = spec.layout
        self.X = np.asarray(X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(y, dtype=float)
        self.n = self.y.size
        self.F = self.layout.num_features

        preds = expert_predictions if expert_predictions is not None else spec.experts
        if spec.requires_experts:
            if preds is None:
                raise ValueError(f"{spec.method} requires expert predictions")
            if preds.means.shape != (self.n, spec.K):
                raise ValueError(
                    f"expert predictions have shape {preds.means.shape}, "
                    f"expected {(self.n, spec.K)}"
                )
        elif preds is not None:
            raise ValueError(f"{spec.method} does not take expert predictions")

        mats = []
        self.rows = {}
        inv_prior = np.empty(self.layout.dim)
        prior_const = 0.0
        r = 0
        for g, count in self.layout.counts.items():
            mats.extend(feature_matrix(self.X, b) for b in spec.bases[g])
            self.rows[g] = slice(r, r + count)
            r += count
            s2 = spec.bases[g][0].prior_weight_variance
            inv_prior[self.layout.group_slices[g]] = 1.0 / s2
            prior_const += 0.5 * count * self.F * np.log(2.0 * np.pi * s2)
        self.G = r
        self.Phi = (np.stack(mats) if mats
                    else np.zeros((0, self.n, self.F)))
        self.inv_prior_var = inv_prior
        self.prior_const = prior_const

        if spec.requires_experts:
            self.mu_e = np.ascontiguousarray(preds.means.T)  # (K, n)
            self.var_e = np.ascontiguousarray(preds.variances.T)
            self.lam_e = 1.0 / self.var_e
            self.prec_floor = np.maximum(
                PRECISION_ABS_FLOOR, PRECISION_REL_FLOOR * self.lam_e.max(axis=0))
            if spec.method == "bhs":
                self.Ldens = -0.5 * (
                    LOG_2PI + np.log(self.var_e)
                    + (self.y[None, :] - self.mu_e) ** 2 * self.lam_e
                )

    def _weight_scores(self, V):
        """(K, n) mixture scores with the last row pinned to zero."""
        Wtil = np.zeros((self.spec.K, self.n))
        if "weight" in self.rows:
            Wtil[: self.spec.K - 1] = V[self.rows["weight"]]
        return Wtil

    # each _loglik_* returns (loglik, deltas) with deltas of shape (G, n),
    # the derivative of the log-likelihood w.r.t. each latent value

    def _loglik_bhs(self, V):
        K = self.spec.K
        Wtil = self._weight_scores(V)
        a, P = _softmax_cols(Wtil + self.Ldens)
        b, Q = _softmax_cols(Wtil)
        return float(np.sum(a - b)), (P - Q)[: K - 1]

    def _loglik_pbhs(self, V):
        logw = self.spec.weight_prior_mean + V
        if logw.max() > LOG_WEIGHT_MAX:
            return -np.inf, None
        w = np.exp(logw)
        wl = w * self.lam_e
        A = wl.sum(axis=0)
        if np.any(A < self.prec_floor):
            return -np.inf, None
        B = (wl * self.mu_e).sum(axis=0)
        m = B / A
        e = self.y - m
        loglik = 0.5 * float(np.sum(np.log(A))) - 0.5 * self.n * LOG_2PI \
            - 0.5 * float(np.sum(A * e * e))
        dA = 0.5 / A - 0.5 * (self.y - m) * (self.y + m)
        return loglik, wl * (dA[None, :] + e[None, :] * self.mu_e)

    def _loglik_mogpe(self, V):
        K = self.spec.K
        Vm = V[self.rows["mean"]]
        Vs_raw = V[self.rows["scale"]]
        Vs = np.clip(Vs_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        live = np.abs(Vs_raw) < LOG_SCALE_CLAMP
        lam = np.exp(-2.0 * Vs)
        resid = self.y[None, :] - Vm
        Ldens = -0.5 * LOG_2PI - Vs - 0.5 * resid**2 * lam
        Wtil = self._weight_scores(V)
        a, P = _softmax_cols(Wtil + Ldens)
        b, Q = _softmax_cols(Wtil)
        D = np.empty((self.G, self.n))
        D[self.rows["mean"]] = P * resid * lam
        D[self.rows["scale"]] = P * (resid**2 * lam - 1.0) * live
        if K > 1:
            D[self.rows["weight"]] = (P - Q)[: K - 1]
        return float(np.sum(a - b)), D

    def _loglik_pogpe(self, V):
        Vm = V[self.rows["mean"]]
        Vs_raw = V[self.rows["scale"]]
        Vs = np.clip(Vs_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        live = np.abs(Vs_raw) < LOG_SCALE_CLAMP
        lam = np.exp(-2.0 * Vs)
        logw = self.spec.weight_prior_mean + V[self.rows["weight"]]
        if logw.max() > LOG_WEIGHT_MAX:
            return -np.inf, None
        w = np.exp(logw)
        wl = w * lam
        A = wl.sum(axis=0)
        floor = np.maximum(PRECISION_ABS_FLOOR,
                           PRECISION_REL_FLOOR * lam.max(axis=0))
        if np.any(A < floor) or not np.all(np.isfinite(A)):
            return -np.inf, None
        B = (wl * Vm).sum(axis=0)
        m = B / A
        e = self.y - m
        loglik = 0.5 * float(np.sum(np.log(A))) - 0.5 * self.n * LOG_2PI \
            - 0.5 * float(np.sum(A * e * e))
        dA = 0.5 / A - 0.5 * (self.y - m) * (self.y + m)
        common = dA[None, :] + e[None, :] * Vm
        D = np.empty((self.G, self.n))
        D[self.rows["weight"]] = wl * common
        D[self.rows["mean"]] = e[None, :] * wl
        D[self.rows["scale"]] = -2.0 * wl * common * live
        return loglik, D

    def _loglik_hetgp(self, V):
        Vm = V[self.rows["mean"]]
        Vs_raw = V[self.rows["scale"]]
        Vs = np.clip(Vs_raw, -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        live = np.abs(Vs_raw) < LOG_SCALE_CLAMP
        lam = np.exp(-2.0 * Vs)
        resid = self.y[None, :] - Vm
        loglik = float(np.sum(-0.5 * LOG_2PI - Vs - 0.5 * resid**2 * lam))
        D = np.empty((self.G, self.n))
        D[self.rows["mean"]] = resid * lam
        D[self.rows["scale"]] = (resid**2 * lam - 1.0) * live
        return loglik, D

    def logpost_and_grad(self, eta):
        eta = np.ascontiguousarray(eta, dtype=float)
        psi = eta.reshape(self.G, self.F)
        V = np.matmul(self.Phi, psi[:, :, None])[:, :, 0]
        loglik, D = getattr(self, f"_loglik_{self.spec.method}")(V)
        if loglik == -np.inf:
            return -np.inf, np.zeros(self.layout.dim)
        grad = np.matmul(D[:, None, :], self.Phi)[:, 0, :].ravel()
        grad -= eta * self.inv_prior_var
        lp = loglik - 0.5 * float(np.dot(eta * self.inv_prior_var, eta)) \
            - self.prior_const
        return lp, grad

    def logpost(self, eta) -> float:
        return self.logpost_and_grad(eta)[0]

    def grad(self, eta) -> np.ndarray:
        return self.logpost_and_grad(eta)[1]

    def to_log_density_model(self) -> LogDensityModel:
        return LogDensityModel(
            dim=self.layout.dim,
            logp=self.logpost,
            grad=self.grad,
            logp_and_grad=self.logpost_and_grad,
        )


def bind(spec: FusionModelSpec, X, y,
         expert_predictions: Optional[ExpertPredictions] = None) -> BoundModel:
    return BoundModel(spec, X, y, expert_predictions)


def map_estimate(model: BoundModel, init, max_iter: int = 500) -> np.ndarray:
    """Posterior mode by L-BFGS, used to warm-start the sampler.

    Chains started at the mode agree on which basin they explore, which is
    what makes split-R diagnostics of mixture posteriors informative.
    """
    from scipy.optimize import minimize

    def objective(eta):
        lp, grad = model.logpost_and_grad(eta)
        if lp == -np.inf:
            return 1e25, np.zeros_like(eta)
        return -lp, -grad

    res = minimize(objective, np.asarray(init, dtype=float), jac=True,
                   method="L-BFGS-B", options={"maxiter": max_iter})
    return np.asarray(res.x, dtype=float)


def bhs_logpost(eta, data, spec) -> float:
    X, y = data
    return BoundModel(spec, X, y).logpost(eta)


def pbhs_logpost(eta, data, spec) -> float:
    X, y = data
    return BoundModel(spec, X, y).logpost(eta)


def mogpe_logpost(eta, data, spec) -> float:
    X, y = data
    return BoundModel(spec, X, y).logpost(eta)


def pogpe_logpost(eta, data, spec) -> float:
    X, y = data
    return BoundModel(spec, X, y).logpost(eta)


def hetgp_logpost(eta, data, spec) -> float:
    X, y = data
    return BoundModel(spec, X, y).logpost(eta)


# -- posterior prediction ---------------------------------------------------


def latent_values(spec: FusionModelSpec, draws, X_query, group: str) -> np.ndarray:
    """Latent function values per draw, shape (J, T, K_group)."""
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    X_query = np.asarray(X_query, dtype=float)
    if X_query.ndim == 1:
        X_query = X_query[:, None]
    count = spec.layout.counts[group]
    sl = spec.layout.group_slices[group]
    psi = draws[:, sl].reshape(draws.shape[0], count, spec.layout.num_features)
    out = np.empty((draws.shape[0], X_query.shape[0], count))
    for k, basis in enumerate(spec.bases[group]):
        out[:, :, k] = psi[:, k, :] @ feature_matrix(X_query, basis).T
    return out


def _lse_last(A):
    m = A.max(axis=-1)
    return m + np.log(np.exp(A - m[..., None]).sum(axis=-1))


def per_draw_predictive(spec: FusionModelSpec, draws, X_query, y_query,
                        expert_predictions: Optional[ExpertPredictions] = None):
    """Per-draw log predictive densities, shape (J, T), plus underflow count.

    Entry (j, t) scores query pair t under posterior draw j; draws whose
    fused precision underflows contribute -inf (zero mass) and are counted.
    """
    method = spec.method
    K = spec.K
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    X_query = np.asarray(X_query, dtype=float)
    if X_query.ndim == 1:
        X_query = X_query[:, None]
    y_query = np.atleast_1d(np.asarray(y_query, dtype=float))
    T = X_query.shape[0]
    J = draws.shape[0]

    if method in ("bhs", "pbhs"):
        preds = expert_predictions if expert_predictions is not None else spec.experts
        if preds is None:
            raise ValueError(f"{method} prediction requires expert predictions")
        if preds.means.shape != (T, K):
            raise ValueError(
                f"expert predictions have shape {preds.means.shape}, "
                f"expected {(T, K)}")
        mu_e, var_e = preds.means, preds.variances
        lam_e = 1.0 / var_e
        Ldens = -0.5 * (LOG_2PI + np.log(var_e)
                        + (y_query[:, None] - mu_e) ** 2 * lam_e)

    def scores(group):
        return latent_values(spec, draws, X_query, group)

    loss = 0
    if method == "bhs":
        if K == 1:
            return np.broadcast_to(Ldens[:, 0], (J, T)).copy(), 0
        Wtil = np.zeros((J, T, K))
        Wtil[:, :, : K - 1] = scores("weight")
        per_draw = _lse_last(Wtil + Ldens[None]) - _lse_last(Wtil)
    elif method == "mogpe":
        Vm = scores("mean")
        Vs = np.clip(scores("scale"), -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        comp = -0.5 * LOG_2PI - Vs \
            - 0.5 * (y_query[None, :, None] - Vm) ** 2 * np.exp(-2.0 * Vs)
        Wtil = np.zeros((J, T, K))
        if K > 1:
            Wtil[:, :, : K - 1] = scores("weight")
        per_draw = _lse_last(Wtil + comp) - _lse_last(Wtil)
    elif method == "hetgp":
        Vm = scores("mean")[:, :, 0]
        Vs = np.clip(scores("scale")[:, :, 0], -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
        per_draw = -0.5 * LOG_2PI - Vs \
            - 0.5 * (y_query[None, :] - Vm) ** 2 * np.exp(-2.0 * Vs)
    else:  # pbhs, pogpe
        if method == "pbhs":
            mu = np.broadcast_to(mu_e, (J, T, K))
            lam = np.broadcast_to(lam_e, (J, T, K))
        else:
            mu = scores("mean")
            Vs = np.clip(scores("scale"), -LOG_SCALE_CLAMP, LOG_SCALE_CLAMP)
            lam = np.exp(-2.0 * Vs)
        logw = spec.weight_prior_mean + scores("weight")
        with np.errstate(over="ignore"):
            w = np.exp(logw)
        wl = w * lam
        A = wl.sum(axis=-1)
        B = (wl * mu).sum(axis=-1)
        floor = np.maximum(PRECISION_ABS_FLOOR,
                           PRECISION_REL_FLOOR * lam.max(axis=-1))
        good = (A > floor) & np.isfinite(A) & np.isfinite(B)
        loss = int(np.sum(~good))
        per_draw = np.full((J, T), -np.inf)
        if np.any(good):
            Ag, Bg = A[good], B[good]
            eg = np.broadcast_to(y_query[None, :], (J, T))[good] - Bg / Ag
            per_draw[good] = 0.5 * np.log(Ag) - 0.5 * LOG_2PI - 0.5 * Ag * eg * eg

    return per_draw, loss


def predictive_logpdf_batch(spec: FusionModelSpec, draws, X_query, y_query,
                            expert_predictions: Optional[ExpertPredictions] = None):
    """Draw-averaged log predictive density at each (x, y) pair.

    Returns ``(logpdf, draw_loss_fraction)`` where ``logpdf`` has one entry
    per query point.
    """
    per_draw, loss = per_draw_predictive(
        spec, draws, X_query, y_query, expert_predictions)
    return logmeanexp(per_draw, axis=0), loss / float(per_draw.size)


def predictive_logpdf(spec: FusionModelSpec, samples, x_star, y_star,
                      expert_predictions: Optional[ExpertPredictions] = None) -> float:
    """Draw-averaged log predictive density at one query point."""
    draws = samples.flat() if hasattr(samples, "flat") else np.atleast_2d(samples)
    x_star = np.atleast_1d(np.asarray(x_star, dtype=float))
    vals, _ = predictive_logpdf_batch(
        spec, draws, x_star[None, :], [y_star], expert_predictions)
    return float(vals[0])
