"""Kernel and exact-GP tests against dense linear-algebra oracles."""

import numpy as np
import pytest

from gpfuse.errors import CholeskyFailure
from gpfuse.kernel import (
    ExactGpPosterior,
    KernelParams,
    Standardizer,
    chol_with_jitter,
    gp_fit,
    gp_predict,
    gp_predict_batch,
    gram_matrix,
    log_marginal_likelihood,
    lml_value_and_grad,
    rbf_eval,
)

LOG_2PI = np.log(2 * np.pi)


def mvn_logpdf_oracle(y, K):
    """Brute-force multivariate normal log-density: explicit inverse + det."""
    n = y.size
    return float(
        -0.5 * y @ np.linalg.inv(K) @ y
        - 0.5 * np.log(np.linalg.det(K))
        - 0.5 * n * LOG_2PI
    )


class TestKernelParams:
    def test_rejects_nonpositive_amplitude(self):
        with pytest.raises(ValueError):
            KernelParams(amplitude=0.0, lengthscale=1.0, noise_variance=0.1)

    def test_rejects_nonpositive_lengthscale(self):
        with pytest.raises(ValueError):
            KernelParams(amplitude=1.0, lengthscale=-1.0, noise_variance=0.1)

    def test_rejects_negative_noise(self):
        with pytest.raises(ValueError):
            KernelParams(amplitude=1.0, lengthscale=1.0, noise_variance=-0.1)

    def test_zero_noise_allowed(self):
        KernelParams(amplitude=1.0, lengthscale=1.0, noise_variance=0.0)


class TestRbfEval:
    def test_zero_distance_gives_amplitude(self):
        p = KernelParams(amplitude=2.5, lengthscale=0.7, noise_variance=0.0)
        x = np.array([0.3, -1.2])
        assert rbf_eval(x, x, p) == 2.5

    def test_one_lengthscale_distance(self):
        p = KernelParams(amplitude=1.0, lengthscale=0.4, noise_variance=0.0)
        assert rbf_eval([0.0], [0.4], p) == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_monotone_decay_to_zero(self):
        p = KernelParams(amplitude=1.0, lengthscale=1.0, noise_variance=0.0)
        dists = [0.5, 1.0, 2.0, 5.0, 20.0]
        vals = [rbf_eval([0.0], [d], p) for d in dists]
        assert all(a > b for a, b in zip(vals, vals[1:]))
        assert vals[-1] < 1e-80

    def test_symmetric_in_arguments(self):
        p = KernelParams(amplitude=1.3, lengthscale=0.9, noise_variance=0.0)
        rng = np.random.default_rng(0)
        for _ in range(5):
            a, b = rng.standard_normal(3), rng.standard_normal(3)
            assert rbf_eval(a, b, p) == rbf_eval(b, a, p)


class TestGramMatrix:
    def test_single_point_with_noise(self):
        p = KernelParams(amplitude=1.0, lengthscale=1.0, noise_variance=0.1)
        K = gram_matrix(np.array([[0.7]]), p, include_noise=True)
        np.testing.assert_allclose(K, [[1.1]])

    def test_exactly_symmetric(self):
        rng = np.random.default_rng(1)
        X = rng.standard_normal((17, 2))
        p = KernelParams(amplitude=0.8, lengthscale=0.5, noise_variance=0.0)
        K = gram_matrix(X, p)
        assert np.array_equal(K, K.T)

    def test_diagonal_values(self):
        rng = np.random.default_rng(2)
        X = rng.standard_normal((6, 1))
        p = KernelParams(amplitude=1.7, lengthscale=0.5, noise_variance=0.3)
        np.testing.assert_allclose(np.diag(gram_matrix(X, p)), 1.7)
        np.testing.assert_allclose(
            np.diag(gram_matrix(X, p, include_noise=True)), 2.0)

    def test_positive_semidefinite_eigen_oracle(self):
        rng = np.random.default_rng(3)
        for trial in range(10):
            X = rng.uniform(-2, 2, (20, 1 + trial % 3))
            p = KernelParams(amplitude=1.0, lengthscale=0.3, noise_variance=0.0)
            eigvals = np.linalg.eigvalsh(gram_matrix(X, p))
            assert eigvals.min() >= -1e-8 * p.amplitude


class TestCholWithJitter:
    def test_no_jitter_for_pd_matrix(self):
        A = np.array([[2.0, 0.5], [0.5, 1.0]])
        L, jitter = chol_with_jitter(A, 1.0)
        assert jitter == 0.0
        np.testing.assert_allclose(L @ L.T, A, atol=1e-14)

    def test_escalates_on_singular(self):
        A = np.ones((3, 3))  # rank one
        L, jitter = chol_with_jitter(A, 1.0)
        assert jitter > 0
        np.testing.assert_allclose(L @ L.T, A + jitter * np.eye(3), atol=1e-12)

    def test_fails_after_max_escalation(self):
        A = np.full((2, 2), np.nan)
        with pytest.raises(CholeskyFailure):
            chol_with_jitter(A, 1.0)


class TestLogMarginalLikelihood:
    def test_standard_normal_at_zero(self):
        # k(x,x) + noise = 1
        p = KernelParams(amplitude=0.4, lengthscale=1.0, noise_variance=0.6)
        lml = log_marginal_likelihood(np.array([[0.0]]), np.array([0.0]), p)
        assert lml == pytest.approx(-0.5 * LOG_2PI, rel=1e-12)

    def test_standard_normal_at_one(self):
        p = KernelParams(amplitude=0.4, lengthscale=1.0, noise_variance=0.6)
        lml = log_marginal_likelihood(np.array([[0.0]]), np.array([1.0]), p)
        assert lml == pytest.approx(-0.5 - 0.5 * LOG_2PI, rel=1e-12)

    def test_diagonal_factorizes(self):
        # points far apart: K is numerically identity
        p = KernelParams(amplitude=0.5, lengthscale=0.01, noise_variance=0.5)
        X = np.array([[0.0], [100.0]])
        y = np.array([1.0, 1.0])
        joint = log_marginal_likelihood(X, y, p)
        single = log_marginal_likelihood(X[:1], y[:1], p)
        assert joint == pytest.approx(2 * single, rel=1e-12)

    def test_matches_mvn_oracle_on_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            n = rng.integers(2, 31)
            d = rng.integers(1, 4)
            X = rng.uniform(-1, 1, (n, d))
            p = KernelParams(
                amplitude=float(rng.uniform(0.3, 2.0)),
                lengthscale=float(rng.uniform(0.2, 1.5)),
                noise_variance=float(rng.uniform(0.05, 0.5)),
            )
            y = rng.standard_normal(n)
            K = gram_matrix(X, p, include_noise=True)
            assert log_marginal_likelihood(X, y, p) == pytest.approx(
                mvn_logpdf_oracle(y, K), rel=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        X = rng.uniform(-1, 1, (12, 1))
        y = rng.standard_normal(12)
        theta = np.log([0.9, 0.4, 0.2])

        def value(t):
            p = KernelParams(*np.exp(t))
            return log_marginal_likelihood(X, y, p)

        _, grad = lml_value_and_grad(X, y, KernelParams(*np.exp(theta)))
        h = 1e-6
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd = (value(theta + e) - value(theta - e)) / (2 * h)
            assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-8)


class TestGpFit:
    def test_zero_targets_give_zero_alpha(self):
        rng = np.random.default_rng(9)
        X = rng.standard_normal((5, 1))
        p = KernelParams(amplitude=1.0, lengthscale=1.0, noise_variance=0.1)
        post = gp_fit(X, np.zeros(5), p)
        np.testing.assert_allclose(post.alpha, 0.0)

    def test_scalar_solve(self):
        # k(x,x) + noise = 2, y = 4 -> alpha = 2
        p = KernelParams(amplitude=1.5, lengthscale=1.0, noise_variance=0.5)
        post = gp_fit(np.array([[0.0]]), np.array([4.0]), p)
        np.testing.assert_allclose(post.alpha, [2.0])

    def test_alpha_matches_dense_solve_oracle(self):
        rng = np.random.default_rng(10)
        X = rng.uniform(-1, 1, (10, 2))
        y = rng.standard_normal(10)
        p = KernelParams(amplitude=1.2, lengthscale=0.6, noise_variance=0.2)
        post = gp_fit(X, y, p)
        K = gram_matrix(X, p, include_noise=True)
        np.testing.assert_allclose(post.alpha, np.linalg.solve(K, y), rtol=1e-8)

    def test_cholesky_reconstructs_gram(self):
        rng = np.random.default_rng(11)
        X = rng.uniform(-1, 1, (8, 1))
        p = KernelParams(amplitude=1.0, lengthscale=0.5, noise_variance=0.3)
        post = gp_fit(X, rng.standard_normal(8), p)
        assert np.all(np.diag(post.cholesky_factor) > 0)
        K = gram_matrix(X, p, include_noise=True)
        np.testing.assert_allclose(
            post.cholesky_factor @ post.cholesky_factor.T, K, atol=1e-10)


class TestGpPredict:
    def test_prior_reversion_far_from_data(self):
        p = KernelParams(amplitude=1.4, lengthscale=0.2, noise_variance=0.1)
        post = gp_fit(np.array([[0.0]]), np.array([3.0]), p)
        pred = gp_predict(post, np.array([50.0]))
        assert pred.mean == pytest.approx(0.0, abs=1e-12)
        assert pred.variance == pytest.approx(1.4, rel=1e-12)

    def test_noiseless_interpolation(self):
        rng = np.random.default_rng(12)
        X = np.linspace(0, 1, 6)[:, None]
        y = rng.standard_normal(6)
        p = KernelParams(amplitude=1.0, lengthscale=0.4, noise_variance=0.0)
        post = gp_fit(X, y, p)
        for i in range(6):
            pred = gp_predict(post, X[i])
            assert pred.mean == pytest.approx(y[i], abs=1e-7)
            assert abs(pred.variance) <= 1e-8

    def test_hand_computed_single_point(self):
        # k** = 1, k* = 0.5, K + noise = [[1]], y = [2] -> mean 1.0, var 0.75
        p = KernelParams(amplitude=1.0, lengthscale=1.0, noise_variance=0.0)
        x_star = np.array([np.sqrt(2 * np.log(2.0))])  # k(x*, 0) = 0.5
        post = gp_fit(np.array([[0.0]]), np.array([2.0]), p)
        pred = gp_predict(post, x_star)
        assert pred.mean == pytest.approx(1.0, rel=1e-12)
        assert pred.variance == pytest.approx(0.75, rel=1e-12)

    def test_observation_noise_flag_adds_noise_variance(self):
        p = KernelParams(amplitude=1.0, lengthscale=0.5, noise_variance=0.2)
        post = gp_fit(np.array([[0.0]]), np.array([1.0]), p)
        latent = gp_predict(post, np.array([0.3]))
        obs = gp_predict(post, np.array([0.3]), observation_noise=True)
        assert obs.variance == pytest.approx(latent.variance + 0.2, rel=1e-12)

    def test_variance_shrinks_as_points_added(self):
        rng = np.random.default_rng(13)
        p = KernelParams(amplitude=1.0, lengthscale=0.3, noise_variance=0.1)
        X_all = np.linspace(0, 1, 14)[:, None]
        y_all = rng.standard_normal(14)
        grid = np.linspace(0, 1, 21)[:, None]
        prev = np.full(21, np.inf)
        for n in range(2, 15):
            post = gp_fit(X_all[:n], y_all[:n], p)
            _, var = gp_predict_batch(post, grid)
            assert np.all(var <= prev + 1e-10)
            prev = var

    def test_batch_matches_single_point_loop(self):
        rng = np.random.default_rng(14)
        X = rng.uniform(0, 1, (7, 2))
        y = rng.standard_normal(7)
        p = KernelParams(amplitude=1.1, lengthscale=0.4, noise_variance=0.15)
        post = gp_fit(X, y, p)
        Q = rng.uniform(0, 1, (9, 2))
        means, variances = gp_predict_batch(post, Q, observation_noise=True)
        for i in range(9):
            pred = gp_predict(post, Q[i], observation_noise=True)
            # batched and single triangular solves may differ in the last bit
            assert means[i] == pytest.approx(pred.mean, rel=1e-13)
            assert variances[i] == pytest.approx(pred.variance, rel=1e-13)


class TestStandardizer:
    def test_transform_centers_and_scales(self):
        rng = np.random.default_rng(15)
        X = rng.uniform(3, 9, (200, 2))
        Z = Standardizer.fit(X).transform(X)
        np.testing.assert_allclose(Z.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(Z.std(axis=0), 1.0, rtol=1e-12)

    def test_degenerate_dimension_keeps_unit_scale(self):
        X = np.column_stack([np.ones(5), np.arange(5.0)])
        std = Standardizer.fit(X)
        assert std.scale[0] == 1.0

    def test_posterior_carries_raw_lengthscale(self):
        X = np.linspace(0, 10, 50)[:, None]
        p = KernelParams(amplitude=1.0, lengthscale=0.5, noise_variance=0.1)
        std = Standardizer.fit(X)
        post = gp_fit(X, np.sin(X[:, 0]), p, standardizer=std)
        np.testing.assert_allclose(post.lengthscale_raw, 0.5 * std.scale)
