"""Pooling-rule tests: mixtures, the Gaussian product closed form, softmax."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpfuse.errors import PrecisionUnderflow
from gpfuse.fusion import (
    GaussianPrediction,
    MixturePdf,
    PositiveWeights,
    SimplexWeights,
    gaussian_logpdf,
    gpoe_fuse,
    gpoe_logpdf,
    linear_pool_logpdf,
    logmeanexp,
    logsumexp,
    softmax,
)

LOG_2PI = np.log(2 * np.pi)


def random_preds(rng, K):
    return [
        GaussianPrediction(float(rng.normal(0, 2)), float(rng.uniform(0.1, 3.0)))
        for _ in range(K)
    ]


def product_logpdf_on_grid(preds, w, grid):
    """Quadrature oracle: normalize the weighted product density on a grid."""
    log_unnorm = sum(
        wk * p.logpdf(grid) for wk, p in zip(w, preds))
    log_norm = np.log(np.trapz(np.exp(log_unnorm - log_unnorm.max()), grid))
    return log_unnorm - log_unnorm.max() - log_norm


class TestGaussianPrediction:
    def test_rejects_nonpositive_variance(self):
        with pytest.raises(ValueError):
            GaussianPrediction(0.0, 0.0)

    def test_logpdf_matches_formula(self):
        p = GaussianPrediction(1.0, 2.0)
        expected = -0.5 * (LOG_2PI + np.log(2.0) + (0.3 - 1.0) ** 2 / 2.0)
        assert p.logpdf(0.3) == pytest.approx(expected, rel=1e-14)


class TestWeightTypes:
    def test_simplex_validates_sum(self):
        with pytest.raises(ValueError):
            SimplexWeights(np.array([0.5, 0.6]))

    def test_simplex_validates_sign(self):
        with pytest.raises(ValueError):
            SimplexWeights(np.array([1.2, -0.2]))

    def test_positive_rejects_zero(self):
        with pytest.raises(ValueError):
            PositiveWeights(np.array([1.0, 0.0]))

    def test_positive_allows_any_scale(self):
        PositiveWeights(np.array([3.0, 1e-15, 40.0]))


class TestSoftmax:
    def test_uniform_on_equal_scores(self):
        np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]).w, 1 / 3)

    def test_saturates_without_overflow(self):
        w = softmax([1000.0, 0.0]).w
        assert w[0] == pytest.approx(1.0)
        assert w[1] < 1e-300

    def test_log_ratio_weights(self):
        w = softmax(np.log([1.0, 2.0, 3.0])).w
        np.testing.assert_allclose(w, [1 / 6, 2 / 6, 3 / 6], rtol=1e-14)

    @settings(deadline=None, max_examples=50)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=6),
           st.floats(-100, 100))
    def test_invariant_to_constant_shift(self, scores, c):
        a = softmax(np.array(scores))
        b = softmax(np.array(scores) + c)
        np.testing.assert_allclose(a.w, b.w, atol=1e-12)


class TestLinearPool:
    def test_singleton_is_component_density(self):
        p = GaussianPrediction(0.7, 1.3)
        w = SimplexWeights(np.array([1.0]))
        assert linear_pool_logpdf([p], w, 0.2) == pytest.approx(
            float(p.logpdf(0.2)), rel=1e-14)

    def test_degenerate_weight_selects_component(self):
        preds = [GaussianPrediction(0.0, 1.0), GaussianPrediction(5.0, 0.5)]
        w = SimplexWeights(np.array([1.0, 0.0]))
        assert linear_pool_logpdf(preds, w, 1.0) == float(preds[0].logpdf(1.0))

    def test_symmetric_midpoint(self):
        preds = [GaussianPrediction(0.0, 1.0), GaussianPrediction(2.0, 1.0)]
        w = SimplexWeights(np.array([0.5, 0.5]))
        # both components have density N(1|0,1) at the midpoint
        assert linear_pool_logpdf(preds, w, 1.0) == pytest.approx(
            -0.5 - 0.5 * LOG_2PI, rel=1e-12)

    def test_mixture_moments_against_monte_carlo(self):
        rng = np.random.default_rng(0)
        preds = random_preds(rng, 3)
        w = softmax(rng.standard_normal(3))
        mix = MixturePdf(components=preds, weights=w)
        comp = rng.choice(3, size=100_000, p=w.w)
        means = np.array([p.mean for p in preds])
        sds = np.array([np.sqrt(p.variance) for p in preds])
        draws = means[comp] + sds[comp] * rng.standard_normal(100_000)
        assert mix.mean() == pytest.approx(draws.mean(), abs=0.01 * max(1, abs(mix.mean())))
        assert mix.variance() == pytest.approx(draws.var(), rel=0.01)

    def test_component_count_mismatch_raises(self):
        with pytest.raises(ValueError):
            linear_pool_logpdf(
                [GaussianPrediction(0, 1)], SimplexWeights(np.array([0.5, 0.5])), 0.0)


class TestGpoeFuse:
    def test_equal_experts_are_fixed_point(self):
        preds = [GaussianPrediction(1.3, 0.7)] * 4
        w = PositiveWeights(np.full(4, 0.25))
        fused = gpoe_fuse(preds, w)
        assert fused.mean == pytest.approx(1.3, rel=1e-12)
        assert fused.variance == pytest.approx(0.7, rel=1e-12)

    def test_vanishing_weight_recovers_first_expert(self):
        preds = [GaussianPrediction(0.0, 1.0), GaussianPrediction(9.0, 0.1)]
        fused = gpoe_fuse(preds, PositiveWeights(np.array([1.0, 1e-15])))
        assert fused.mean == pytest.approx(0.0, abs=1e-12)
        assert fused.variance == pytest.approx(1.0, rel=1e-12)

    def test_equal_precision_symmetry(self):
        preds = [GaussianPrediction(0.0, 1.0), GaussianPrediction(2.0, 1.0)]
        fused = gpoe_fuse(preds, PositiveWeights(np.array([1.0, 1.0])))
        assert fused.mean == pytest.approx(1.0, rel=1e-12)
        assert fused.variance == pytest.approx(0.5, rel=1e-12)

    def test_doubling_weights_halves_variance(self):
        preds = [GaussianPrediction(0.4, 1.5)] * 2
        f1 = gpoe_fuse(preds, PositiveWeights(np.array([1.0, 1.0])))
        f2 = gpoe_fuse(preds, PositiveWeights(np.array([2.0, 2.0])))
        assert f2.variance == pytest.approx(f1.variance / 2, rel=1e-12)
        assert f2.mean == pytest.approx(f1.mean, rel=1e-12)

    def test_precision_underflow_raises(self):
        preds = [GaussianPrediction(0.0, 1.0)]
        with pytest.raises(PrecisionUnderflow):
            gpoe_fuse(preds, PositiveWeights(np.array([1e-310])))

    def test_simplex_weights_bound_variance(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            K = int(rng.integers(2, 6))
            preds = random_preds(rng, K)
            w = softmax(rng.standard_normal(K)).w
            w = np.maximum(w, 1e-12)
            fused = gpoe_fuse(preds, PositiveWeights(w / w.sum()))
            variances = [p.variance for p in preds]
            assert min(variances) <= fused.variance <= max(variances) * (1 + 1e-9)


class TestGpoeLogpdf:
    def test_single_expert_identity(self):
        p = GaussianPrediction(0.3, 0.9)
        w = PositiveWeights(np.array([1.0]))
        assert gpoe_logpdf([p], w, -0.5) == pytest.approx(
            float(p.logpdf(-0.5)), rel=1e-13)

    def test_matches_grid_normalized_product(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            K = int(rng.integers(1, 5))
            preds = random_preds(rng, K)
            w = rng.uniform(0.1, 2.0, K)
            fused = gpoe_fuse(preds, PositiveWeights(w))
            sd = np.sqrt(fused.variance)
            grid = np.linspace(fused.mean - 10 * sd, fused.mean + 10 * sd, 20_001)
            oracle = product_logpdf_on_grid(preds, w, grid)
            ours = gpoe_logpdf(preds, PositiveWeights(w), grid[7000])
            assert ours == pytest.approx(oracle[7000], abs=1e-6)

    def test_proportional_to_weighted_product_pointwise(self):
        rng = np.random.default_rng(3)
        preds = random_preds(rng, 3)
        w = rng.uniform(0.2, 1.5, 3)
        grid = np.linspace(-6, 6, 101)
        log_fused = np.array([gpoe_logpdf(preds, PositiveWeights(w), y) for y in grid])
        log_prod = sum(wk * p.logpdf(grid) for wk, p in zip(w, preds))
        ratio = log_fused - log_prod
        np.testing.assert_allclose(ratio, ratio[0], rtol=0, atol=1e-8)

    @settings(deadline=None, max_examples=20)
    @given(st.integers(0, 2**31 - 1))
    def test_density_integrates_to_one(self, seed):
        rng = np.random.default_rng(seed)
        K = int(rng.integers(1, 5))
        preds = random_preds(rng, K)
        w = PositiveWeights(rng.uniform(0.1, 2.0, K))
        fused = gpoe_fuse(preds, w)
        sd = np.sqrt(fused.variance)
        grid = np.linspace(fused.mean - 10 * sd, fused.mean + 10 * sd, 10_001)
        dens = np.exp([gpoe_logpdf(preds, w, y) for y in grid])
        assert np.trapz(dens, grid) == pytest.approx(1.0, abs=1e-6)


class TestLogSumExpHelpers:
    def test_logsumexp_handles_minus_inf(self):
        assert logsumexp(np.array([0.0, -np.inf])) == pytest.approx(0.0)
        assert logsumexp(np.array([-np.inf, -np.inf])) == -np.inf

    def test_logmeanexp_constant(self):
        assert logmeanexp(np.full(10, -3.2)) == pytest.approx(-3.2, rel=1e-14)

    def test_logmeanexp_half_mass(self):
        assert logmeanexp(np.array([0.0, -np.inf])) == pytest.approx(np.log(0.5))

    def test_logmeanexp_deep_underflow(self):
        vals = np.array([-700.0, -700.0, -700.0])
        assert logmeanexp(vals) == pytest.approx(-700.0, rel=1e-12)

    def test_logmeanexp_axis(self):
        a = np.array([[0.0, -np.inf], [-1.0, -1.0]])
        np.testing.assert_allclose(
            logmeanexp(a, axis=1), [np.log(0.5), -1.0], rtol=1e-12)
