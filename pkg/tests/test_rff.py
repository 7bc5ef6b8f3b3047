"""Random Fourier feature tests: spectral sampling, feature map, MC fidelity."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpfuse.kernel import KernelParams, rbf_eval
from gpfuse.rff import (
    RffBasis,
    RffWeights,
    approx_kernel,
    feature_map,
    feature_matrix,
    rff_predict,
    sample_frequencies,
)


def basis_with(frequencies, lengthscale=1.0, amplitude=1.0):
    freq = np.atleast_2d(np.asarray(frequencies, dtype=float))
    return RffBasis(
        frequencies=freq,
        lengthscale=lengthscale,
        amplitude=amplitude,
        prior_weight_variance=amplitude / freq.shape[0],
    )


class TestSampleFrequencies:
    def test_deterministic_given_seed(self):
        a = sample_frequencies(50, 0.7, 2, rng_seed=123)
        b = sample_frequencies(50, 0.7, 2, rng_seed=123)
        assert np.array_equal(a.frequencies, b.frequencies)

    def test_spectral_standard_deviation(self):
        basis = sample_frequencies(10_000, 2.0, 1, rng_seed=0)
        sd = basis.frequencies.std()
        assert abs(sd - 0.5) / 0.5 < 0.03

    def test_lengthscale_scale_equivariance(self):
        a = sample_frequencies(20, 1.0, 3, rng_seed=5)
        b = sample_frequencies(20, 2.0, 3, rng_seed=5)
        np.testing.assert_allclose(b.frequencies, a.frequencies / 2.0)

    def test_prior_weight_variance(self):
        basis = sample_frequencies(25, 1.0, 1, rng_seed=1, amplitude=2.0)
        assert basis.prior_weight_variance == pytest.approx(2.0 / 25)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            sample_frequencies(0, 1.0, 1, rng_seed=0)
        with pytest.raises(ValueError):
            sample_frequencies(5, -1.0, 1, rng_seed=0)


class TestFeatureMap:
    def test_zero_input_alternates_one_zero(self):
        basis = sample_frequencies(4, 0.5, 3, rng_seed=2)
        phi = feature_map(np.zeros(3), basis)
        np.testing.assert_allclose(phi, [1, 0, 1, 0, 1, 0, 1, 0])

    def test_known_frequency_pair(self):
        basis = basis_with([[np.pi]])
        phi = feature_map([0.5], basis)
        assert phi[0] == pytest.approx(0.0, abs=1e-15)
        assert phi[1] == pytest.approx(1.0, rel=1e-15)

    @settings(deadline=None, max_examples=25)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=2))
    def test_squared_norm_is_M(self, x):
        basis = sample_frequencies(7, 0.3, 2, rng_seed=3)
        phi = feature_map(np.array(x), basis)
        assert float(phi @ phi) == pytest.approx(7.0, rel=1e-12)

    def test_matrix_matches_map(self):
        basis = sample_frequencies(6, 0.8, 2, rng_seed=4)
        rng = np.random.default_rng(0)
        X = rng.standard_normal((5, 2))
        Phi = feature_matrix(X, basis)
        for i in range(5):
            # batched and single-row projections may differ in the last bit
            np.testing.assert_allclose(Phi[i], feature_map(X[i], basis),
                                       rtol=1e-14, atol=1e-14)


class TestRffPredict:
    def test_zero_weights(self):
        basis = sample_frequencies(3, 1.0, 1, rng_seed=5)
        assert rff_predict([0.4], basis, RffWeights(np.zeros(6))) == 0.0

    def test_unit_vector_extracts_first_cosine(self):
        basis = sample_frequencies(3, 1.0, 1, rng_seed=6)
        e1 = np.zeros(6)
        e1[0] = 1.0
        x = np.array([0.8])
        expected = np.cos(basis.frequencies[0, 0] * 0.8)
        assert rff_predict(x, basis, RffWeights(e1)) == pytest.approx(expected, rel=1e-15)

    def test_matches_dot_product_oracle(self):
        rng = np.random.default_rng(7)
        basis = sample_frequencies(11, 0.6, 2, rng_seed=8)
        x = rng.standard_normal(2)
        psi = rng.standard_normal(22)
        oracle = 0.0
        for m in range(11):
            t = float(basis.frequencies[m] @ x)
            oracle += psi[2 * m] * np.cos(t) + psi[2 * m + 1] * np.sin(t)
        assert rff_predict(x, basis, RffWeights(psi)) == pytest.approx(oracle, rel=1e-12)


class TestApproxKernel:
    def test_identical_inputs_recover_amplitude(self):
        basis = sample_frequencies(13, 0.5, 1, rng_seed=9, amplitude=1.7)
        x = np.array([0.3])
        assert approx_kernel(x, x, basis) == pytest.approx(1.7, rel=1e-12)

    def test_error_within_monte_carlo_bound(self):
        M = 2000
        basis = sample_frequencies(M, 1.0, 1, rng_seed=10)
        params = KernelParams(amplitude=1.0, lengthscale=1.0, noise_variance=0.0)
        approx = approx_kernel([0.0], [1.0], basis)
        exact = rbf_eval([0.0], [1.0], params)
        assert abs(approx - exact) < 5 / np.sqrt(M)

    def test_pooling_bases_shrinks_error(self):
        params = KernelParams(amplitude=1.0, lengthscale=1.0, noise_variance=0.0)
        x, xp = np.array([0.2]), np.array([0.9])
        exact = rbf_eval(x, xp, params)
        estimates = np.array([
            approx_kernel(x, xp, sample_frequencies(40, 1.0, 1, rng_seed=s))
            for s in range(50)
        ])
        single_errors = np.abs(estimates - exact)
        pooled_error = abs(estimates.mean() - exact)
        assert pooled_error < np.median(single_errors)

    def test_unbiased_across_seeds(self):
        params = KernelParams(amplitude=1.0, lengthscale=0.8, noise_variance=0.0)
        rng = np.random.default_rng(11)
        pairs = rng.uniform(-1, 1, (10, 2))
        for x0, x1 in pairs:
            exact = rbf_eval([x0], [x1], params)
            est = np.array([
                approx_kernel([x0], [x1],
                              sample_frequencies(8, 0.8, 1, rng_seed=s))
                for s in range(200)
            ])
            se = est.std(ddof=1) / np.sqrt(est.size)
            assert abs(est.mean() - exact) < 3 * max(se, 1e-12)

    def test_median_error_non_increasing_in_M(self):
        params = KernelParams(amplitude=1.0, lengthscale=1.0, noise_variance=0.0)
        rng = np.random.default_rng(12)
        pairs = rng.uniform(-1.5, 1.5, (20, 2))
        medians = []
        for M in (10, 50, 250, 1250):
            errs = []
            for seed in range(20):
                basis = sample_frequencies(M, 1.0, 1, rng_seed=seed)
                errs.extend(
                    abs(approx_kernel([a], [b], basis) - rbf_eval([a], [b], params))
                    for a, b in pairs
                )
            medians.append(np.median(errs))
        assert all(a >= b for a, b in zip(medians, medians[1:]))


class TestPriorDrawVariance:
    def test_function_variance_matches_amplitude(self):
        basis = sample_frequencies(30, 0.5, 1, rng_seed=13, amplitude=1.0)
        rng = np.random.default_rng(14)
        phi = feature_map([0.37], basis)
        psi = rng.standard_normal((10_000, 60)) * np.sqrt(basis.prior_weight_variance)
        draws = psi @ phi
        assert abs(draws.var() - 1.0) < 0.1
