"""Gradient-based MCMC: a No-U-Turn sampler over differentiable log-densities.

The transition kernel is the recursive tree-doubling sampler with a slice
variable; step sizes are tuned by dual averaging during warmup and a diagonal
mass matrix is estimated from draws in the second half of warmup. Everything
is deterministic given the chain seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import seeds
from .errors import AllDivergent, CellTimeout, InsufficientChains, NonFiniteDensity
from .fusion import logmeanexp

# Log slice excess treated as a divergent transition.
DELTA_MAX = 1000.0

# Scale of the per-coordinate Gaussian used for default chain initialization.
INIT_SCALE = 0.1

# Dual-averaging constants.
_DA_GAMMA = 0.05
_DA_T0 = 10.0
_DA_KAPPA = 0.75


@dataclass
class LogDensityModel:
    """A differentiable unnormalized log-density over a flat parameter vector."""

    dim: int
    logp: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    logp_and_grad: Optional[Callable] = None

    def __post_init__(self):
        if self.logp_and_grad is None:
            lp, gr = self.logp, self.grad
            self.logp_and_grad = lambda x: (lp(x), gr(x))


@dataclass(frozen=True)
class ChainConfig:
    chains: int = 4
    warmup_draws: int = 500
    kept_draws: int = 500
    target_accept: float = 0.8
    max_tree_depth: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.kept_draws < 1:
            raise ValueError("kept_draws must be >= 1")
        if self.warmup_draws < 0:
            raise ValueError("warmup_draws must be >= 0")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be >= 1")


@dataclass
class PosteriorSamples:
    """Sampled parameters, shape (chains, kept_draws, dim), plus diagnostics."""

    draws: np.ndarray
    divergence_count: np.ndarray
    step_sizes: np.ndarray
    mean_accept: np.ndarray
    mass_diag: np.ndarray

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_total(self) -> int:
        return self.draws.shape[0] * self.draws.shape[1]

    def flat(self) -> np.ndarray:
        """All draws stacked chain-major, shape (chains * kept_draws, dim)."""
        return self.draws.reshape(-1, self.draws.shape[2])


def _safe_wrap(logp_and_grad):
    """Map non-finite densities or gradients to (-inf, 0) so trees just stop."""

    def wrapped(theta):
        lp, gr = logp_and_grad(theta)
        if not np.isfinite(lp) or not np.all(np.isfinite(gr)):
            return -np.inf, np.zeros_like(theta)
        return float(lp), gr

    return wrapped


def _kinetic(r, inv_mass) -> float:
    return 0.5 * float(np.dot(r * inv_mass, r))


def _leapfrog(f, theta, r, grad, eps, inv_mass):
    r1 = r + 0.5 * eps * grad
    theta1 = theta + eps * (inv_mass * r1)
    logp1, grad1 = f(theta1)
    if logp1 == -np.inf:
        return theta1, r1, logp1, grad1
    r1 = r1 + 0.5 * eps * grad1
    return theta1, r1, logp1, grad1


def _find_reasonable_eps(f, theta, logp, grad, inv_mass, rng) -> float:
    eps = 1.0
    r = rng.standard_normal(theta.size) / np.sqrt(inv_mass)
    joint0 = logp - _kinetic(r, inv_mass)
    _, r1, logp1, _ = _leapfrog(f, theta, r, grad, eps, inv_mass)
    log_ratio = (logp1 - _kinetic(r1, inv_mass)) - joint0
    if not np.isfinite(log_ratio):
        log_ratio = -np.inf
    a = 1.0 if log_ratio > np.log(0.5) else -1.0
    while a * log_ratio > -a * np.log(2.0):
        eps *= 2.0**a
        if eps > 1e7 or eps < 1e-10:
            break
        _, r1, logp1, _ = _leapfrog(f, theta, r, grad, eps, inv_mass)
        log_ratio = (logp1 - _kinetic(r1, inv_mass)) - joint0
        if not np.isfinite(log_ratio):
            log_ratio = -np.inf
    return eps


def _build_tree(f, theta, r, grad, logp, logu, v, j, eps, inv_mass, joint0, rng):
    """Recursively double a trajectory; returns the 14-tuple

    (theta-, r-, grad-, theta+, r+, grad+,
     proposal, proposal_logp, proposal_grad, n, s, alpha, n_alpha, diverged).
    """
    if j == 0:
        theta1, r1, logp1, grad1 = _leapfrog(f, theta, r, grad, v * eps, inv_mass)
        joint = logp1 - _kinetic(r1, inv_mass) if logp1 > -np.inf else -np.inf
        diverged = not (joint - logu > -DELTA_MAX)
        n1 = 1 if logu <= joint else 0
        s1 = 0 if diverged else 1
        delta = joint - joint0
        alpha = 1.0 if delta >= 0 else float(np.exp(delta)) if np.isfinite(delta) else 0.0
        return (theta1, r1, grad1, theta1, r1, grad1,
                theta1, logp1, grad1, n1, s1, alpha, 1, diverged)

    (theta_m, r_m, grad_m, theta_p, r_p, grad_p,
     prop, prop_logp, prop_grad, n1, s1, alpha, n_alpha, div) = _build_tree(
        f, theta, r, grad, logp, logu, v, j - 1, eps, inv_mass, joint0, rng)
    if s1 == 1:
        if v == -1:
            (theta_m, r_m, grad_m, _, _, _,
             prop2, prop2_logp, prop2_grad, n2, s2, a2, na2, div2) = _build_tree(
                f, theta_m, r_m, grad_m, logp, logu, v, j - 1, eps, inv_mass, joint0, rng)
        else:
            (_, _, _, theta_p, r_p, grad_p,
             prop2, prop2_logp, prop2_grad, n2, s2, a2, na2, div2) = _build_tree(
                f, theta_p, r_p, grad_p, logp, logu, v, j - 1, eps, inv_mass, joint0, rng)
        if n2 > 0 and rng.random() < n2 / max(n1 + n2, 1):
            prop, prop_logp, prop_grad = prop2, prop2_logp, prop2_grad
        dtheta = theta_p - theta_m
        ok_m = float(np.dot(dtheta, inv_mass * r_m)) >= 0.0
        ok_p = float(np.dot(dtheta, inv_mass * r_p)) >= 0.0
        s1 = s2 if (ok_m and ok_p) else 0
        n1 += n2
        alpha += a2
        n_alpha += na2
        div = div or div2
    return (theta_m, r_m, grad_m, theta_p, r_p, grad_p,
            prop, prop_logp, prop_grad, n1, s1, alpha, n_alpha, div)


def _transition(f, theta, logp, grad, eps, inv_mass, max_depth, rng):
    """One NUTS update; returns (theta, logp, grad, accept_stat, diverged)."""
    r0 = rng.standard_normal(theta.size) / np.sqrt(inv_mass)
    joint0 = logp - _kinetic(r0, inv_mass)
    logu = joint0 - rng.exponential()

    theta_m = theta_p = theta
    r_m = r_p = r0
    grad_m = grad_p = grad
    prop, prop_logp, prop_grad = theta, logp, grad
    n, s, j = 1, 1, 0
    alpha_sum, n_alpha, diverged = 0.0, 0, False

    while s == 1 and j < max_depth:
        v = 1 if rng.random() < 0.5 else -1
        if v == -1:
            (theta_m, r_m, grad_m, _, _, _,
             cand, cand_logp, cand_grad, n1, s1, a1, na1, div1) = _build_tree(
                f, theta_m, r_m, grad_m, logp, logu, v, j, eps, inv_mass, joint0, rng)
        else:
            (_, _, _, theta_p, r_p, grad_p,
             cand, cand_logp, cand_grad, n1, s1, a1, na1, div1) = _build_tree(
                f, theta_p, r_p, grad_p, logp, logu, v, j, eps, inv_mass, joint0, rng)
        if s1 == 1 and n1 > 0 and rng.random() < min(1.0, n1 / n):
            prop, prop_logp, prop_grad = cand, cand_logp, cand_grad
        n += n1
        alpha_sum += a1
        n_alpha += na1
        diverged = diverged or div1
        if s1 == 1:
            dtheta = theta_p - theta_m
            ok_m = float(np.dot(dtheta, inv_mass * r_m)) >= 0.0
            ok_p = float(np.dot(dtheta, inv_mass * r_p)) >= 0.0
            s = 1 if (ok_m and ok_p) else 0
        else:
            s = 0
        j += 1

    accept_stat = alpha_sum / max(n_alpha, 1)
    return prop, prop_logp, prop_grad, accept_stat, diverged


class _DualAveraging:
    def __init__(self, eps0: float, target: float):
        self.mu = float(np.log(10.0 * eps0))
        self.target = target
        self.hbar = 0.0
        self.t = 0
        self.log_eps = float(np.log(eps0))
        self.log_eps_bar = 0.0

    def step(self, accept_stat: float) -> float:
        self.t += 1
        frac = 1.0 / (self.t + _DA_T0)
        self.hbar = (1.0 - frac) * self.hbar + frac * (self.target - accept_stat)
        self.log_eps = self.mu - np.sqrt(self.t) / _DA_GAMMA * self.hbar
        w = self.t ** (-_DA_KAPPA)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return float(np.exp(self.log_eps))

    @property
    def adapted_eps(self) -> float:
        return float(np.exp(self.log_eps_bar))


def _adaptation_windows(warmup: int):
    """Doubling mass-estimation windows inside warmup, as (start, end) pairs.

    A step-size-only buffer opens and closes warmup; the middle is covered by
    windows that double in length (the last extended to fill), and the mass
    matrix is re-estimated at the end of each. Repeated re-estimation matters:
    a single window measured under a badly scaled metric underestimates the
    slow directions and never recovers.
    """
    if warmup < 40:
        return []
    head = max(int(round(0.15 * warmup)), 10)
    # a long step-size-only tail lets the averaged step size settle under the
    # final mass matrix; short tails freeze it during the post-restart dip
    tail = max(int(round(0.25 * warmup)), 10)
    lo, hi = head, warmup - tail
    size = 25 if hi - lo >= 100 else max((hi - lo) // 4, 5)
    windows = []
    pos = lo
    while pos < hi:
        end = pos + size
        if end + 2 * size > hi:
            end = hi
        windows.append((pos, end))
        pos = end
        size *= 2
    return windows


def _shrunk_variance(block: np.ndarray) -> np.ndarray:
    nw = block.shape[0]
    var = block.var(axis=0, ddof=1)
    return (nw / (nw + 5.0)) * var + 1e-3 * (5.0 / (nw + 5.0))


def _run_chain(model, init, config, chain_rng, deadline=None):
    f = _safe_wrap(model.logp_and_grad)
    theta = np.array(init, dtype=float).copy()
    logp, grad = model.logp_and_grad(theta)
    if not np.isfinite(logp):
        raise NonFiniteDensity(f"log-density is {logp} at the initial point")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteDensity("gradient is non-finite at the initial point")
    logp = float(logp)

    dim = theta.size
    inv_mass = np.ones(dim)
    warmup = config.warmup_draws
    windows = _adaptation_windows(warmup)
    window_idx = 0
    window_draws = []

    eps = _find_reasonable_eps(f, theta, logp, grad, inv_mass, chain_rng)
    da = _DualAveraging(eps, config.target_accept)

    for i in range(warmup):
        if deadline is not None and time.monotonic() > deadline:
            raise CellTimeout("chain exceeded its wall-clock budget during warmup")
        theta, logp, grad, accept, _ = _transition(
            f, theta, logp, grad, eps, inv_mass, config.max_tree_depth, chain_rng)
        eps = da.step(accept)
        if window_idx < len(windows):
            lo, hi = windows[window_idx]
            if lo <= i < hi:
                window_draws.append(theta)
            if i == hi - 1:
                inv_mass = _shrunk_variance(np.asarray(window_draws))
                window_draws = []
                window_idx += 1
                eps = _find_reasonable_eps(f, theta, logp, grad, inv_mass, chain_rng)
                da = _DualAveraging(eps, config.target_accept)
    if warmup > 0:
        eps = da.adapted_eps

    draws = np.empty((config.kept_draws, dim))
    divergences = 0
    accept_sum = 0.0
    for i in range(config.kept_draws):
        if deadline is not None and time.monotonic() > deadline:
            raise CellTimeout("chain exceeded its wall-clock budget during sampling")
        theta, logp, grad, accept, diverged = _transition(
            f, theta, logp, grad, eps, inv_mass, config.max_tree_depth, chain_rng)
        draws[i] = theta
        divergences += int(diverged)
        accept_sum += accept
    if divergences == config.kept_draws:
        raise AllDivergent("every post-warmup transition diverged")

    return draws, divergences, eps, accept_sum / config.kept_draws, inv_mass


def nuts_sample(model: LogDensityModel, init, config: ChainConfig,
                deadline: Optional[float] = None) -> PosteriorSamples:
    """Sample ``config.chains`` independent NUTS chains from ``model``.

    ``init`` may be a vector used for every chain, or None to draw each
    chain's start from N(0, INIT_SCALE^2) per coordinate. ``deadline`` is an
    optional ``time.monotonic()`` cutoff enforced between transitions.
    """
    if model.dim < 1:
        raise ValueError("model dimension must be >= 1")
    all_draws = np.empty((config.chains, config.kept_draws, model.dim))
    div_counts = np.empty(config.chains, dtype=int)
    eps_out = np.empty(config.chains)
    acc_out = np.empty(config.chains)
    mass_out = np.empty((config.chains, model.dim))
    for c in range(config.chains):
        chain_rng = np.random.default_rng(seeds.child(config.rng_seed, seeds.CHAIN, c))
        if init is None:
            init_rng = np.random.default_rng(seeds.child(config.rng_seed, seeds.INIT, c))
            theta0 = INIT_SCALE * init_rng.standard_normal(model.dim)
        else:
            theta0 = np.asarray(init, dtype=float)
        draws, divs, eps, acc, inv_mass = _run_chain(
            model, theta0, config, chain_rng, deadline)
        all_draws[c] = draws
        div_counts[c] = divs
        eps_out[c] = eps
        acc_out[c] = acc
        mass_out[c] = inv_mass
    return PosteriorSamples(
        draws=all_draws,
        divergence_count=div_counts,
        step_sizes=eps_out,
        mean_accept=acc_out,
        mass_diag=mass_out,
    )


def _split_chains(draws: np.ndarray) -> np.ndarray:
    n_chains, n_draws, dim = draws.shape
    half = n_draws // 2
    return np.concatenate([draws[:, :half], draws[:, half : 2 * half]], axis=0)


def potential_scale_reduction(samples) -> np.ndarray:
    """Split potential-scale-reduction factor per coordinate.

    Chains are split in half; 1.0 indicates agreement of within- and
    between-sequence variances. Zero-variance coordinates report 1.0.
    """
    draws = samples.draws if isinstance(samples, PosteriorSamples) else np.asarray(samples)
    if draws.ndim != 3:
        raise ValueError("draws must have shape (chains, draws, dim)")
    if draws.shape[0] < 2 or draws.shape[1] < 4:
        raise InsufficientChains("need >= 2 chains and >= 4 draws per chain")
    seqs = _split_chains(draws)
    n = seqs.shape[1]
    means = seqs.mean(axis=1)
    within = seqs.var(axis=1, ddof=1).mean(axis=0)
    between = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * within + between / n
    out = np.ones(draws.shape[2])
    live = within > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out[live] = np.sqrt(var_plus[live] / within[live])
    out[(~live) & (between > 0)] = np.inf
    return out


def _autocovariance(seqs: np.ndarray) -> np.ndarray:
    """Biased autocovariance along axis 1 for sequences (m, n, dim)."""
    m, n, dim = seqs.shape
    centered = seqs - seqs.mean(axis=1, keepdims=True)
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(centered, nfft, axis=1)
    acov = np.fft.irfft(f * np.conj(f), nfft, axis=1)[:, :n].real / n
    return acov


def effective_sample_size(samples) -> np.ndarray:
    """Effective sample size per coordinate (Geyer initial monotone sequence)."""
    draws = samples.draws if isinstance(samples, PosteriorSamples) else np.asarray(samples)
    m, n, dim = draws.shape
    if n < 4:
        raise InsufficientChains("need >= 4 draws per chain")
    acov = _autocovariance(draws)
    chain_var = acov[:, 0] * n / (n - 1.0)
    within = chain_var.mean(axis=0)
    if m > 1:
        between = n * draws.mean(axis=1).var(axis=0, ddof=1)
        var_plus = (n - 1) / n * within + between / n
    else:
        var_plus = within
    mean_acov = acov.mean(axis=0)

    ess = np.empty(dim)
    for k in range(dim):
        if var_plus[k] <= 0:
            ess[k] = m * n
            continue
        rho = 1.0 - (within[k] - mean_acov[:, k]) / var_plus[k]
        rho[0] = 1.0
        # pairwise sums, truncated at first negative pair, forced monotone
        max_pairs = (n - 1) // 2
        tau = 1.0
        prev = np.inf
        s = 0.0
        for t in range(1, max_pairs):
            pair = rho[2 * t - 1] + rho[2 * t]
            if pair < 0:
                break
            pair = min(pair, prev)
            prev = pair
            s += pair
        tau = max(1.0, 1.0 + 2.0 * s)
        ess[k] = m * n / tau
    return ess


def mc_standard_error(samples) -> np.ndarray:
    """ESS-based Monte Carlo standard error of the posterior mean."""
    draws = samples.draws if isinstance(samples, PosteriorSamples) else np.asarray(samples)
    flat = draws.reshape(-1, draws.shape[2])
    return flat.std(axis=0, ddof=1) / np.sqrt(effective_sample_size(draws))


def posterior_predictive_logpdf(samples, per_draw_logpdf, x_star, y_star) -> float:
    """log of the draw-averaged predictive density at (x_star, y_star).

    ``per_draw_logpdf(eta, y_star, x_star)`` scores one posterior draw; the
    average is taken with log-sum-exp so densities down to exp(-700) pool
    without underflow.
    """
    flat = samples.flat() if isinstance(samples, PosteriorSamples) else np.asarray(samples)
    if flat.shape[0] < 1:
        raise ValueError("need at least one draw")
    vals = np.array([per_draw_logpdf(eta, y_star, x_star) for eta in flat])
    return float(logmeanexp(vals))
